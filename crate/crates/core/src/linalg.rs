//! Small dense helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub(crate) const RIDGE: f64 = 1e-10;

/// Cholesky factor, retrying once with a `RIDGE` on the diagonal.
pub(crate) fn cholesky_or_ridge(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let mut ridged = a.clone();
    for i in 0..ridged.nrows() {
        ridged[(i, i)] += RIDGE;
    }
    log::warn!("factorization failed; retried with a {RIDGE:e} diagonal ridge");
    Cholesky::new(ridged).ok_or_else(|| Error::NumericalSingularity {
        condition: condition_estimate(a),
    })
}

/// `log|A|` from a Cholesky factor.
pub(crate) fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Ratio of extreme eigenvalue magnitudes of a symmetric matrix.
pub(crate) fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let ev = a.clone().symmetric_eigenvalues();
    let max = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Columns of `x` that are (numerically) linear combinations of earlier
/// columns, found by a pivot-free Cholesky on the unit-scaled Gram matrix.
pub(crate) fn collinear_columns(x: &DMatrix<f64>) -> Vec<usize> {
    const TOL: f64 = 1e-12;
    let k = x.ncols();
    let g = x.transpose() * x;
    let scale: Vec<f64> = (0..k).map(|j| g[(j, j)].sqrt()).collect();
    let mut l = DMatrix::<f64>::zeros(k, k);
    let mut bad = Vec::new();
    for j in 0..k {
        if scale[j] == 0.0 {
            bad.push(j);
            continue;
        }
        let mut d = 1.0;
        for p in 0..j {
            if l[(p, p)] == 0.0 {
                continue;
            }
            let mut s = g[(j, p)] / (scale[j] * scale[p]);
            for q in 0..p {
                s -= l[(j, q)] * l[(p, q)];
            }
            l[(j, p)] = s / l[(p, p)];
            d -= l[(j, p)] * l[(j, p)];
        }
        // d is 1 - R^2 of column j on the retained earlier columns
        if d <= TOL {
            bad.push(j);
            for p in 0..j {
                l[(j, p)] = 0.0;
            }
        } else {
            l[(j, j)] = d.sqrt();
        }
    }
    bad
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation of two equal-length slices.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}

pub(crate) fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
