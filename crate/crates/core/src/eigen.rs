//! Moran eigenvector bases and Moran-coefficient diagnostics.
//!
//! The exact basis eigen-decomposes the doubly centred connectivity `MCM`
//! and keeps eigenvectors with positive eigenvalues, i.e. the patterns of
//! positive spatial dependence, in descending order of Moran coefficient.
//! The Nyström basis solves the same problem through a low-rank kernel
//! approximation built on a small set of anchor points, for `O(N L^2)`
//! cost and `O(N L)` memory.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    build_connectivity_with, cross_connectivity_with, dist, kmeans_anchors, AnchorSet,
    ConnectivityMatrix, Kernel, Range, SiteSet, SpatialWeights,
};

/// Default maximum number of retained eigenpairs.
pub const DEFAULT_CAP: usize = 200;

/// Largest N accepted by the exact (dense O(N^3)) path.
pub const EXACT_MAX_N: usize = 10_000;

/// Relative threshold below which an eigenvalue is not considered positive.
const POSITIVE_TOL: f64 = 1e-9;

/// Moran eigenvectors (columns) with their positive eigenvalues, descending.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    vectors: DMatrix<f64>,
    values: Vec<f64>,
    exact: bool,
    cap: usize,
    available: usize,
}

impl EigenBasis {
    /// A basis with no spatial columns; fits on it reduce to OLS.
    pub fn empty(n: usize) -> Self {
        Self {
            vectors: DMatrix::zeros(n, 0),
            values: Vec::new(),
            exact: true,
            cap: 0,
            available: 0,
        }
    }

    /// Assembles a basis from precomputed parts, checking shapes and ordering.
    pub fn from_parts(vectors: DMatrix<f64>, values: Vec<f64>, exact: bool) -> Result<Self> {
        if vectors.ncols() != values.len() {
            return Err(Error::Input(format!(
                "basis has {} columns but {} eigenvalues",
                vectors.ncols(),
                values.len()
            )));
        }
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Input("basis eigenvalues must be positive and finite".into()));
        }
        if values.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Input("basis eigenvalues must be in descending order".into()));
        }
        let l = values.len();
        Ok(Self {
            vectors,
            values,
            exact,
            cap: l,
            available: l,
        })
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// Number of positive eigenpairs found before truncation to `cap`.
    pub fn available(&self) -> usize {
        self.available
    }

    /// Number of retained eigenvectors, L.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of sites, N.
    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }
}

/// Makes the first clearly nonzero entry of each column positive.
fn apply_sign_convention(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        if let Some(&first) = col.iter().find(|v| v.abs() > 1e-12) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Doubly centred copy of a symmetric matrix: `M A M` with `M = I - 11'/N`.
fn double_center(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let row_means: Vec<f64> = (0..n).map(|j| a.column(j).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    DMatrix::from_fn(n, n, |i, j| a[(i, j)] - row_means[i] - row_means[j] + grand)
}

/// Positive eigenpairs of a symmetric matrix, sorted descending, capped.
fn positive_eigenpairs(m: DMatrix<f64>, cap: usize) -> Result<(DMatrix<f64>, Vec<f64>, usize)> {
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let tol = POSITIVE_TOL * scale;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > tol)
        .collect();
    if order.is_empty() {
        return Err(Error::NoPositivePattern);
    }
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let available = order.len();
    order.truncate(cap);
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = eig.eigenvectors.select_columns(order.iter());
    apply_sign_convention(&mut vectors);
    Ok((vectors, values, available))
}

/// Exact Moran basis from a dense connectivity matrix.
pub fn exact_basis(c: &ConnectivityMatrix, cap: usize) -> Result<EigenBasis> {
    if cap == 0 {
        return Err(Error::Input("eigenvector cap must be at least 1".into()));
    }
    if c.len() > EXACT_MAX_N {
        return Err(Error::Input(format!(
            "exact eigen-decomposition limited to N <= {EXACT_MAX_N} (got {}); use the Nyström approximation",
            c.len()
        )));
    }
    let mcm = double_center(c.entries());
    let (vectors, values, available) = positive_eigenpairs(mcm, cap)?;
    Ok(EigenBasis {
        vectors,
        values,
        exact: true,
        cap,
        available,
    })
}

/// Nyström-approximated Moran basis from anchor points.
///
/// The kernel `K = C + I` is approximated by `K_NL K_L^+ K_LN` and doubly
/// centred by column-centring `K_NL` over sites. Its leading eigenvectors
/// come from an `L x L` problem (one-shot orthogonalisation), so the
/// returned columns are orthonormal and centred, and the eigenvalues are on
/// the N-site scale with no rescaling. With every site as an anchor the
/// result coincides with the exact basis.
pub fn nystrom_basis(
    sites: &SiteSet,
    anchors: &AnchorSet,
    range: f64,
    cap: usize,
) -> Result<EigenBasis> {
    nystrom_basis_with(sites, anchors, range, cap, Kernel::Exponential)
}

fn anchor_kernel(anchors: &AnchorSet, range: f64, kernel: Kernel) -> DMatrix<f64> {
    let ac = anchors.coords();
    let l = ac.len();
    DMatrix::from_fn(l, l, |i, j| {
        if i == j {
            0.0
        } else {
            kernel.eval(dist(ac[i], ac[j]), range)
        }
    })
}

pub fn nystrom_basis_with(
    sites: &SiteSet,
    anchors: &AnchorSet,
    range: f64,
    cap: usize,
    kernel: Kernel,
) -> Result<EigenBasis> {
    if cap == 0 {
        return Err(Error::Input("eigenvector cap must be at least 1".into()));
    }
    let mut k_l = anchor_kernel(anchors, range, kernel);
    k_l.fill_diagonal(1.0);
    let mut k_nl = cross_connectivity_with(sites, anchors, range, kernel)?;
    for mut col in k_nl.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }

    // K_L^{-1/2} on the numerically positive part of its spectrum
    let eig = SymmetricEigen::new(k_l);
    let top = eig.eigenvalues.iter().fold(0.0f64, |s, v| s.max(*v));
    let inv_sqrt = eig.eigenvalues.map(|v| if v > 1e-10 * top { 1.0 / v.sqrt() } else { 0.0 });
    let w = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt);
    // R' = K_NL K_L^{-1/2}, so the approximated kernel is R'R
    let r_t = k_nl * (&w * eig.eigenvectors.transpose());
    let small = SymmetricEigen::new(r_t.tr_mul(&r_t));

    let mut order: Vec<usize> = (0..small.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| small.eigenvalues[b].total_cmp(&small.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| small.eigenvalues[i] - 1.0).collect();
    let scale = values.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let keep: Vec<usize> = (0..values.len())
        .filter(|&k| values[k] > POSITIVE_TOL * scale && small.eigenvalues[order[k]] > 0.0)
        .collect();
    if keep.is_empty() {
        return Err(Error::NoPositivePattern);
    }
    let available = keep.len();
    let keep: Vec<usize> = keep.into_iter().take(cap).collect();
    let mut vectors = DMatrix::zeros(sites.len(), keep.len());
    for (c, &k) in keep.iter().enumerate() {
        let i = order[k];
        let col = &r_t * small.eigenvectors.column(i) / small.eigenvalues[i].sqrt();
        vectors.set_column(c, &col);
    }
    apply_sign_convention(&mut vectors);
    Ok(EigenBasis {
        vectors,
        values: keep.iter().map(|&k| values[k]).collect(),
        exact: false,
        cap,
        available,
    })
}

/// Plain Nyström extension of the anchor eigenvectors:
/// `E = [C_NL - 1 m'] E_L (Lambda_L + I)^{-1}` with `m` the column means of
/// `C_L + I`, and eigenvalues `((L + N) / L)(Lambda_L + I) - I`.
///
/// Columns are neither orthogonal nor unit length. Kept as a reference for
/// comparing against [`nystrom_basis`].
pub fn nystrom_extension(
    sites: &SiteSet,
    anchors: &AnchorSet,
    range: f64,
    kernel: Kernel,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = sites.len();
    let l = anchors.len();
    let c_l = anchor_kernel(anchors, range, kernel);
    let (e_l, lambda_l, _) = positive_eigenpairs(double_center(&c_l), l)?;
    let anchor_means: Vec<f64> = (0..l).map(|j| (c_l.column(j).sum() + 1.0) / l as f64).collect();
    let mut c_nl = cross_connectivity_with(sites, anchors, range, kernel)?;
    for (j, mut col) in c_nl.column_iter_mut().enumerate() {
        col.add_scalar_mut(-anchor_means[j]);
    }
    let mut vectors = c_nl * &e_l;
    for (k, mut col) in vectors.column_iter_mut().enumerate() {
        col /= lambda_l[k] + 1.0;
    }
    let factor = (l + n) as f64 / l as f64;
    let values = lambda_l.iter().map(|&v| factor * (v + 1.0) - 1.0).collect();
    Ok((vectors, values))
}

/// How to obtain the eigenbasis from site coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum BasisMode {
    Exact,
    Nystrom { anchors: usize, seed: u64 },
}

/// Builds a basis straight from coordinates, resolving the kernel range first.
/// Returns the basis and the range used.
pub fn basis_from_sites(
    sites: &SiteSet,
    mode: BasisMode,
    range: Range,
    kernel: Kernel,
    cap: usize,
) -> Result<(EigenBasis, f64)> {
    let r = range.resolve(sites)?;
    let basis = match mode {
        BasisMode::Exact => {
            if sites.len() > EXACT_MAX_N {
                return Err(Error::Input(format!(
                    "exact eigen-decomposition limited to N <= {EXACT_MAX_N} (got {}); use the Nyström approximation",
                    sites.len()
                )));
            }
            let c = build_connectivity_with(sites, Range::Fixed(r), kernel)?;
            exact_basis(&c, cap)?
        }
        BasisMode::Nystrom { anchors, seed } => {
            let anchors = kmeans_anchors(sites, anchors.min(sites.len()), seed)?;
            nystrom_basis_with(sites, &anchors, r, cap, kernel)?
        }
    };
    Ok((basis, r))
}

/// Moran coefficient with its normality-assumption moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MoranReport {
    pub mc: f64,
    pub expectation: f64,
    pub variance: f64,
    pub z: f64,
}

fn centered(z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("Moran input contains non-finite values".into()));
    }
    let m = z.iter().sum::<f64>() / z.len() as f64;
    let zc: Vec<f64> = z.iter().map(|v| v - m).collect();
    let ss: f64 = zc.iter().map(|v| v * v).sum();
    let size = z.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    if ss <= 1e-24 * size * size * z.len() as f64 || ss == 0.0 {
        return Err(Error::UndefinedMoran);
    }
    Ok(zc)
}

struct WeightSums {
    /// `zc' C zc`
    quad: f64,
    s0: f64,
    /// sum of squared weights
    sq: f64,
    /// sum of squared row sums
    row_sq: f64,
}

fn weight_sums<W: SpatialWeights + ?Sized>(w: &W, zc: &[f64]) -> WeightSums {
    let n = w.len();
    let rows = (0..n).into_par_iter().map_init(
        || vec![0.0; n],
        |row, i| {
            w.fill_row(i, row);
            let mut dot = 0.0;
            let mut sum = 0.0;
            let mut sq = 0.0;
            for (c, z) in row.iter().zip(zc) {
                dot += c * z;
                sum += c;
                sq += c * c;
            }
            (zc[i] * dot, sum, sq, sum * sum)
        },
    );
    let (quad, s0, sq, row_sq) = rows.reduce(
        || (0.0, 0.0, 0.0, 0.0),
        |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3),
    );
    WeightSums { quad, s0, sq, row_sq }
}

/// `MC[z] = (N / 1'C1) (z'MCMz / z'Mz)`.
pub fn moran_coefficient<W: SpatialWeights + ?Sized>(z: &[f64], c: &W) -> Result<f64> {
    check_len(z, c)?;
    let zc = centered(z)?;
    let s = weight_sums(c, &zc);
    let ss: f64 = zc.iter().map(|v| v * v).sum();
    Ok(z.len() as f64 / s.s0 * s.quad / ss)
}

/// Moran test statistic under the normality assumption; weights are taken as symmetric.
pub fn moran_z<W: SpatialWeights + ?Sized>(residuals: &[f64], c: &W) -> Result<MoranReport> {
    check_len(residuals, c)?;
    let zc = centered(residuals)?;
    let s = weight_sums(c, &zc);
    let n = residuals.len() as f64;
    let ss: f64 = zc.iter().map(|v| v * v).sum();
    let mc = n / s.s0 * s.quad / ss;
    let expectation = -1.0 / (n - 1.0);
    // symmetric weights: S1 = 1/2 sum (2 c_ij)^2, S2 = sum (2 row_i)^2
    let s1 = 2.0 * s.sq;
    let s2 = 4.0 * s.row_sq;
    let variance = (n * n * s1 - n * s2 + 3.0 * s.s0 * s.s0) / ((n * n - 1.0) * s.s0 * s.s0)
        - expectation * expectation;
    if !(variance > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "Moran variance is not positive ({variance:e})"
        )));
    }
    Ok(MoranReport {
        mc,
        expectation,
        variance,
        z: (mc - expectation) / variance.sqrt(),
    })
}

fn check_len<W: SpatialWeights + ?Sized>(z: &[f64], c: &W) -> Result<()> {
    if z.len() != c.len() {
        return Err(Error::Input(format!(
            "vector length {} does not match connectivity size {}",
            z.len(),
            c.len()
        )));
    }
    Ok(())
}
