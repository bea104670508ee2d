//! Sample quantiles, Gaussian kernel densities and recentered influence functions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Densities at or below this value are rejected.
pub const MIN_DENSITY: f64 = 1e-12;

/// A quantile level strictly inside (0.01, 0.99).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantileSpec(f64);

impl QuantileSpec {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.01 && tau < 0.99 {
            Ok(Self(tau))
        } else {
            Err(Error::Input(format!(
                "quantile level must lie in (0.01, 0.99), got {tau}"
            )))
        }
    }

    pub fn tau(self) -> f64 {
        self.0
    }
}

/// Kernel bandwidth: Silverman's rule of thumb or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityEstimate {
    pub bandwidth: f64,
    pub value_at_quantile: f64,
}

/// RIF values of a response at one quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct RifVector {
    pub values: Vec<f64>,
    pub q_hat: f64,
    pub density: DensityEstimate,
    pub tau: QuantileSpec,
}

fn check_sample(y: &[f64]) -> Result<()> {
    if y.len() < 2 {
        return Err(Error::Input(format!(
            "at least 2 observations are required, got {}",
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("sample contains non-finite values".into()));
    }
    Ok(())
}

fn sorted(y: &[f64]) -> Vec<f64> {
    let mut s = y.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Linear interpolation between order statistics at `h = (N-1) p + 1` (1-based).
pub(crate) fn quantile_sorted(s: &[f64], p: f64) -> f64 {
    let h = (s.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= s.len() {
        s[s.len() - 1]
    } else {
        s[lo] + frac * (s[lo + 1] - s[lo])
    }
}

/// Same value as [`quantile_sorted`] on the sorted data, by selection in
/// linear time; reorders `v`.
pub(crate) fn quantile_select(v: &mut [f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let (_, &mut at, right) = v.select_nth_unstable_by(lo, f64::total_cmp);
    if right.is_empty() {
        return at;
    }
    let next = right.iter().copied().fold(f64::INFINITY, f64::min);
    at + frac * (next - at)
}

pub fn sample_quantile(y: &[f64], tau: QuantileSpec) -> Result<f64> {
    check_sample(y)?;
    Ok(quantile_sorted(&sorted(y), tau.tau()))
}

/// Silverman's rule `0.9 min(sd, IQR/1.34) N^(-1/5)`; falls back to `sd`
/// when the interquartile range is zero.
pub fn silverman_bandwidth(y: &[f64]) -> Result<f64> {
    check_sample(y)?;
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::DegenerateDensity("sample has zero variance".into()));
    }
    let mut s = y.to_vec();
    let iqr = quantile_select(&mut s, 0.75) - quantile_select(&mut s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * n.powf(-0.2))
}

fn gaussian_kde(y: &[f64], point: f64, h: f64) -> f64 {
    let norm = 1.0 / ((2.0 * PI).sqrt() * h * y.len() as f64);
    norm * y
        .iter()
        .map(|v| {
            let u = (point - v) / h;
            (-0.5 * u * u).exp()
        })
        .sum::<f64>()
}

/// Gaussian kernel density of `y` evaluated at `point`.
pub fn kde_at(y: &[f64], point: f64, bandwidth: Bandwidth) -> Result<DensityEstimate> {
    check_sample(y)?;
    let h = match bandwidth {
        Bandwidth::Auto => silverman_bandwidth(y)?,
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => {
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            if y.iter().all(|v| *v == mean) {
                return Err(Error::DegenerateDensity("sample has zero variance".into()));
            }
            h
        }
        Bandwidth::Fixed(h) => {
            return Err(Error::Input(format!("bandwidth must be > 0, got {h}")));
        }
    };
    let value = gaussian_kde(y, point, h);
    if !(value > MIN_DENSITY) {
        return Err(Error::NearZeroDensity {
            value,
            min: MIN_DENSITY,
        });
    }
    Ok(DensityEstimate {
        bandwidth: h,
        value_at_quantile: value,
    })
}

/// `RIF(y_i) = q + (tau - 1{y_i <= q}) / f(q)`.
pub fn rif_vector(y: &[f64], tau: QuantileSpec, bandwidth: Bandwidth) -> Result<RifVector> {
    let q_hat = sample_quantile(y, tau)?;
    let density = kde_at(y, q_hat, bandwidth)?;
    let values = rif_values(y, q_hat, density.value_at_quantile, tau);
    Ok(RifVector {
        values,
        q_hat,
        density,
        tau,
    })
}

/// RIF values for given quantile and density estimates; `y_i == q` counts as below.
pub fn rif_values(y: &[f64], q: f64, f: f64, tau: QuantileSpec) -> Vec<f64> {
    let t = tau.tau();
    let below = q - (1.0 - t) / f;
    let above = q + t / f;
    y.iter().map(|&v| if v <= q { below } else { above }).collect()
}

/// Rescales RIF deviations from `q` by `f / f_m`.
pub fn rif_transform(rif: &[f64], q: f64, f: f64, f_m: f64) -> Result<Vec<f64>> {
    if !(f > 0.0) || !(f_m > 0.0) {
        return Err(Error::Input(format!(
            "densities must be positive, got f = {f}, f_m = {f_m}"
        )));
    }
    let ratio = f / f_m;
    Ok(rif.iter().map(|&r| ratio * (r - q) + q).collect())
}
