//! Synthetic data from the random-effects eigenvector model
//! `y = X beta + E gamma + eps`, `gamma ~ N(0, sg^2 s^2 Lambda(alpha))`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::eigen::{basis_from_sites, BasisMode, EigenBasis, DEFAULT_CAP};
use crate::error::{Error, Result};
use crate::estimator::lambda_alpha;
use crate::geometry::{Kernel, Range, SiteSet};

pub const MIN_N: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub n: usize,
    /// Intercept first; K = `beta.len()`.
    pub beta: Vec<f64>,
    pub sg_ratio: f64,
    pub alpha: f64,
    pub sigma: f64,
    /// Correlation strength between `x_2` and the spatial process.
    pub covariate_spatial_corr: f64,
    pub seed: u64,
    pub basis: BasisMode,
    pub cap: usize,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            n: 500,
            beta: vec![1.0, 2.0, -1.0],
            sg_ratio: 1.0,
            alpha: 1.0,
            sigma: 1.0,
            covariate_spatial_corr: 0.0,
            seed: 0,
            basis: BasisMode::Exact,
            cap: DEFAULT_CAP,
        }
    }
}

impl SimSpec {
    fn validate(&self) -> Result<()> {
        if self.n < MIN_N {
            return Err(Error::Input(format!("simulation needs n >= {MIN_N}, got {}", self.n)));
        }
        if self.beta.is_empty() {
            return Err(Error::Input("beta must contain at least the intercept".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Input(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.sg_ratio >= 0.0) {
            return Err(Error::Input(format!("sg_ratio must be >= 0, got {}", self.sg_ratio)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Input(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.covariate_spatial_corr) {
            return Err(Error::Input(format!(
                "covariate_spatial_corr must lie in [0, 1), got {}",
                self.covariate_spatial_corr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimData {
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub sites: SiteSet,
    pub basis: EigenBasis,
    pub range: f64,
    pub gamma: Vec<f64>,
    /// `E gamma`
    pub spatial: Vec<f64>,
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    v.iter().map(|x| (x - m) / sd).collect()
}

pub fn generate(spec: &SimSpec) -> Result<SimData> {
    spec.validate()?;
    let n = spec.n;
    let k = spec.beta.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let sites = SiteSet::new((0..n).map(|_| [rng.random(), rng.random()]).collect())?;
    let (basis, range) = basis_from_sites(&sites, spec.basis, Range::Auto, Kernel::Exponential, spec.cap)?;

    let sigma_gamma = spec.sg_ratio * spec.sigma;
    let gamma: Vec<f64> = lambda_alpha(basis.values(), spec.alpha)
        .into_iter()
        .map(|l| sigma_gamma * l.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let spatial: Vec<f64> = (basis.vectors() * DVector::from_column_slice(&gamma))
        .iter()
        .copied()
        .collect();

    let mut x = DMatrix::from_element(n, k, 1.0);
    for j in 1..k {
        for i in 0..n {
            x[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let rho = spec.covariate_spatial_corr;
    if k > 1 && rho > 0.0 {
        let pattern = if sigma_gamma > 0.0 {
            standardize(&spatial)
        } else {
            standardize(basis.vectors().column(0).as_slice())
        };
        let w = (1.0 - rho * rho).sqrt();
        for i in 0..n {
            x[(i, 1)] = rho * pattern[i] + w * x[(i, 1)];
        }
    }

    let xb = &x * DVector::from_column_slice(&spec.beta);
    let y = (0..n)
        .map(|i| xb[i] + spatial[i] + spec.sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(SimData {
        y,
        x,
        sites,
        basis,
        range,
        gamma,
        spatial,
    })
}
