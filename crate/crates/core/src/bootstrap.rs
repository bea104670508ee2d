//! Semiparametric bootstrap for coefficient uncertainty.
//!
//! Each replicate draws `u_m ~ N(0, s2 I_L)` and `eps_m ~ N(0, s2 I_N)`,
//! builds `r_m = X beta + E V u_m + eps_m`, rescales its deviations from
//! the sample quantile by `f / f_m` where `f_m` is the kernel density of a
//! with-replacement resample of the response at the original quantile, and
//! refits on the cached cross-products.
//!
//! The refit only sees `X'r`, `E'r` and `r'r`. Since the rescale is affine
//! and `eps_m` is Gaussian, those moments are drawn from their exact joint
//! law: `[X E]'eps ~ N(0, G)` with `G` the cached Gram matrix, and the part
//! of `eps'eps` orthogonal to `[X E]` is an independent chi-square with
//! `N - rank(G)` degrees of freedom. Apart from the density resample, a
//! replicate therefore costs nothing that grows with N.
//! [`Bootstrap::replicate_with`] keeps the explicit N-vector construction
//! as a reference.
//!
//! Replicate `m` uses its own ChaCha stream `(seed, m)`, so the output does
//! not depend on the number of worker threads.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::eigen::EigenBasis;
use crate::error::{Error, Result};
use crate::estimator::{fit_cached, v_matrix, GramCache, Moments, QuantileFit, SpatialVariance};
use crate::rif::{kde_at, quantile_sorted, rif_transform, Bandwidth};

/// Share of failed replicates above which the bootstrap is rejected.
pub const MAX_FAILED_SHARE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub workers: usize,
    pub ci_level: f64,
    /// Resample `f_m`; when false, `f_m = f` in every replicate.
    pub resample_density: bool,
    /// Reuse the full-sample bandwidth instead of recomputing it per resample.
    pub freeze_bandwidth: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 200,
            seed: 0,
            workers: 1,
            ci_level: 0.95,
            resample_density: true,
            freeze_bandwidth: false,
        }
    }
}

impl BootstrapConfig {
    fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Input("bootstrap needs at least one replicate".into()));
        }
        if self.workers == 0 {
            return Err(Error::Input("bootstrap needs at least one worker".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Input(format!(
                "confidence level must lie in (0, 1), got {}",
                self.ci_level
            )));
        }
        Ok(())
    }
}

/// What the density replicates need: the response, its sample quantile and
/// the full-sample density there.
#[derive(Debug, Clone, Copy)]
pub struct DensitySource<'a> {
    pub y: &'a [f64],
    pub q_hat: f64,
    pub f_hat: f64,
    pub bandwidth: f64,
}

/// KDE of `y[indices]` at `q_hat`; `bandwidth` of `None` recomputes Silverman's rule.
pub fn density_from_indices(
    y: &[f64],
    indices: &[usize],
    q_hat: f64,
    bandwidth: Option<f64>,
) -> Result<f64> {
    let sample: Vec<f64> = indices.iter().map(|&i| y[i]).collect();
    let bw = match bandwidth {
        Some(h) => Bandwidth::Fixed(h),
        None => Bandwidth::Auto,
    };
    Ok(kde_at(&sample, q_hat, bw)?.value_at_quantile)
}

/// One nonparametric replicate of the density at the original quantile.
pub fn density_replicate<R: Rng + ?Sized>(
    y: &[f64],
    q_hat: f64,
    bandwidth: Option<f64>,
    rng: &mut R,
) -> Result<f64> {
    let n = y.len();
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    density_from_indices(y, &idx, q_hat, bandwidth)
}

/// Standard-normal draws for one replicate; scaled by `sigma` when used.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateNoise {
    pub u: Vec<f64>,
    pub eps: Vec<f64>,
}

impl ReplicateNoise {
    pub fn draw<R: Rng + ?Sized>(l: usize, n: usize, rng: &mut R) -> Self {
        let u = (0..l).map(|_| rng.sample(StandardNormal)).collect();
        let eps = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self { u, eps }
    }

    pub fn zeros(l: usize, n: usize) -> Self {
        Self {
            u: vec![0.0; l],
            eps: vec![0.0; n],
        }
    }
}

/// Replicate noise reduced to what the refit needs, unscaled: `u`, the
/// projections `w = [X E]'eps` and the residual `eps'eps - w'G^+ w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedNoise {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub rest_ss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateOutcome {
    pub beta: Vec<f64>,
    pub theta: SpatialVariance,
    pub f_m: f64,
    pub converged: bool,
}

/// Read-only state shared by all replicates of one quantile.
pub struct Bootstrap<'a> {
    fit: &'a QuantileFit,
    gram: &'a GramCache,
    basis: &'a EigenBasis,
    x: &'a DMatrix<f64>,
    density: Option<DensitySource<'a>>,
    fixed_part: DVector<f64>,
    v_hat: Vec<f64>,
    /// `G^{1/2}` on the positive part of the spectrum of `G = [X E]'[X E]`.
    g_root: DMatrix<f64>,
    /// `G^{+1/2}`, for projecting explicit noise.
    g_root_pinv: DMatrix<f64>,
    rest_dof: usize,
}

impl<'a> Bootstrap<'a> {
    /// `density` is `None` for mean models, where no RIF rescaling applies.
    pub fn new(
        fit: &'a QuantileFit,
        gram: &'a GramCache,
        basis: &'a EigenBasis,
        x: &'a DMatrix<f64>,
        density: Option<DensitySource<'a>>,
    ) -> Result<Self> {
        if x.nrows() != basis.n() || x.ncols() != fit.beta.len() || basis.len() != gram.l {
            return Err(Error::Input("bootstrap inputs have inconsistent shapes".into()));
        }
        if !(fit.sigma2 > 0.0 && fit.sigma2.is_finite()) {
            return Err(Error::Input(format!(
                "bootstrap needs a positive residual variance, got {}",
                fit.sigma2
            )));
        }
        let fixed_part = x * DVector::from_column_slice(&fit.beta);
        let v_hat = v_matrix(fit.theta(), basis.values());
        let (k, l) = (gram.k, gram.l);
        let mut g = DMatrix::zeros(k + l, k + l);
        g.view_mut((0, 0), (k, k)).copy_from(&gram.m_xx);
        g.view_mut((k, 0), (l, k)).copy_from(&gram.m_ex);
        g.view_mut((0, k), (k, l)).copy_from(&gram.m_ex.transpose());
        g.view_mut((k, k), (l, l)).copy_from(&gram.m_ee);
        let eig = SymmetricEigen::new(g);
        let top = eig.eigenvalues.iter().fold(0.0f64, |s, v| s.max(*v));
        let positive = |v: f64| v > 1e-12 * top;
        let rank = eig.eigenvalues.iter().filter(|v| positive(**v)).count();
        let root = eig.eigenvalues.map(|v| if positive(v) { v.sqrt() } else { 0.0 });
        let root_inv = eig.eigenvalues.map(|v| if positive(v) { 1.0 / v.sqrt() } else { 0.0 });
        let g_root = &eig.eigenvectors * DMatrix::from_diagonal(&root);
        let g_root_pinv = DMatrix::from_diagonal(&root_inv) * eig.eigenvectors.transpose();
        Ok(Self {
            fit,
            gram,
            basis,
            x,
            density,
            fixed_part,
            v_hat,
            g_root,
            g_root_pinv,
            rest_dof: gram.n.saturating_sub(rank),
        })
    }

    /// Simulated response of one replicate, before density rescaling.
    pub fn simulate_response(&self, noise: &ReplicateNoise) -> Vec<f64> {
        let sigma = self.fit.sigma();
        let mut r = self.fixed_part.clone();
        if !self.v_hat.is_empty() {
            let vu = DVector::from_iterator(
                self.v_hat.len(),
                self.v_hat.iter().zip(&noise.u).map(|(v, u)| v * u * sigma),
            );
            r += self.basis.vectors() * vu;
        }
        for (ri, e) in r.iter_mut().zip(&noise.eps) {
            *ri += sigma * e;
        }
        r.as_slice().to_vec()
    }

    /// Steps (ii) to (iv) for given noise and density replicate.
    pub fn replicate_with(&self, noise: &ReplicateNoise, f_m: f64) -> Result<ReplicateOutcome> {
        let r_m = self.simulate_response(noise);
        let r_tilde = match &self.density {
            Some(d) => rif_transform(&r_m, d.q_hat, d.f_hat, f_m)?,
            None => r_m,
        };
        let moments = Moments::new(self.x, self.basis, &r_tilde)?;
        let fit = fit_cached(self.gram, &moments)?;
        Ok(ReplicateOutcome {
            theta: fit.theta(),
            beta: fit.beta,
            f_m,
            converged: fit.converged,
        })
    }

    /// Draws the reduced noise of one replicate.
    pub fn draw_projected<R: Rng + ?Sized>(&self, rng: &mut R) -> ProjectedNoise {
        let u = (0..self.gram.l).map(|_| rng.sample(StandardNormal)).collect();
        let z = DVector::from_iterator(self.g_root.ncols(), (0..self.g_root.ncols()).map(|_| rng.sample(StandardNormal)));
        let w = &self.g_root * &z;
        let rest_ss = if self.rest_dof > 0 {
            rng.sample(ChiSquared::new(self.rest_dof as f64).expect("positive degrees of freedom"))
        } else {
            0.0
        };
        ProjectedNoise {
            u,
            w: w.as_slice().to_vec(),
            rest_ss,
        }
    }

    /// Reduces explicit noise to its projections; feeding the result to
    /// [`Bootstrap::replicate_projected`] reproduces [`Bootstrap::replicate_with`].
    pub fn project(&self, noise: &ReplicateNoise) -> ProjectedNoise {
        let eps = DVector::from_column_slice(&noise.eps);
        let (k, l) = (self.gram.k, self.gram.l);
        let mut w = DVector::zeros(k + l);
        w.rows_mut(0, k).copy_from(&self.x.tr_mul(&eps));
        w.rows_mut(k, l).copy_from(&self.basis.vectors().tr_mul(&eps));
        let explained = (&self.g_root_pinv * &w).norm_squared();
        ProjectedNoise {
            u: noise.u.clone(),
            w: w.as_slice().to_vec(),
            rest_ss: (eps.norm_squared() - explained).max(0.0),
        }
    }

    /// Moments of the rescaled replicate response, from cached cross-products.
    fn projected_moments(&self, noise: &ProjectedNoise, f_m: f64) -> Moments {
        let g = self.gram;
        let (k, l) = (g.k, g.l);
        let sigma = self.fit.sigma();
        let beta = DVector::from_column_slice(&self.fit.beta);
        let s = DVector::from_iterator(l, self.v_hat.iter().zip(&noise.u).map(|(v, u)| v * u * sigma));
        let w_x = DVector::from_column_slice(&noise.w[..k]);
        let w_e = DVector::from_column_slice(&noise.w[k..]);

        let ex_beta = &g.m_ex * &beta;
        let ee_s = &g.m_ee * &s;
        let xx_beta = &g.m_xx * &beta;
        let m_x = &xx_beta + g.m_ex.tr_mul(&s) + &w_x * sigma;
        let m_e = &ex_beta + &ee_s + &w_e * sigma;
        let mean_ss = beta.dot(&xx_beta) + 2.0 * ex_beta.dot(&s) + s.dot(&ee_s);
        let cross = beta.dot(&w_x) + s.dot(&w_e);
        let eps_ss = (&self.g_root_pinv * DVector::from_column_slice(&noise.w)).norm_squared() + noise.rest_ss;
        let r_sq = mean_ss + 2.0 * sigma * cross + sigma * sigma * eps_ss;

        match &self.density {
            Some(d) if f_m != d.f_hat => {
                // r~ = a r + b 1 with the intercept column giving X'1 and 1'r
                let a = d.f_hat / f_m;
                let b = (1.0 - a) * d.q_hat;
                let sum_r = m_x[0];
                Moments {
                    m_x: m_x * a + g.m_xx.column(0) * b,
                    m_e: m_e * a + g.m_ex.column(0) * b,
                    r_sq: a * a * r_sq + 2.0 * a * b * sum_r + b * b * g.n as f64,
                }
            }
            _ => Moments { m_x, m_e, r_sq },
        }
    }

    /// Refit of one replicate from reduced noise.
    pub fn replicate_projected(&self, noise: &ProjectedNoise, f_m: f64) -> Result<ReplicateOutcome> {
        let moments = self.projected_moments(noise, f_m);
        let fit = fit_cached(self.gram, &moments)?;
        Ok(ReplicateOutcome {
            theta: fit.theta(),
            beta: fit.beta,
            f_m,
            converged: fit.converged,
        })
    }

    /// Replicate `index`: density resample (when enabled), then `u`, then
    /// the projected noise, all from stream `index` of `config.seed`.
    fn one(&self, config: &BootstrapConfig, index: usize) -> Result<ReplicateOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(index as u64);
        let f_m = match &self.density {
            Some(d) if config.resample_density => {
                let bw = config.freeze_bandwidth.then_some(d.bandwidth);
                density_replicate(d.y, d.q_hat, bw, &mut rng)?
            }
            Some(d) => d.f_hat,
            None => 1.0,
        };
        let noise = self.draw_projected(&mut rng);
        self.replicate_projected(&noise, f_m)
    }

    /// Runs all replicates on `config.workers` threads and summarises them.
    pub fn run(&self, config: &BootstrapConfig) -> Result<BootstrapResult> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Input(format!("cannot start worker pool: {e}")))?;
        let start = Instant::now();
        let outcomes: Vec<(Result<ReplicateOutcome>, f64)> = pool.install(|| {
            (0..config.replicates)
                .into_par_iter()
                .map(|m| {
                    let t = Instant::now();
                    let out = self.one(config, m);
                    (out, t.elapsed().as_secs_f64())
                })
                .collect()
        });
        let wall = start.elapsed().as_secs_f64();
        let per_replicate =
            outcomes.iter().map(|(_, t)| t).sum::<f64>() / outcomes.len() as f64;
        summarize(
            outcomes.into_iter().map(|(o, _)| o).collect(),
            self.fit.beta.len(),
            config,
            BootstrapTiming {
                wall_secs: wall,
                mean_replicate_secs: per_replicate,
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapTiming {
    pub wall_secs: f64,
    pub mean_replicate_secs: f64,
}

/// Replicate draws with their percentile summaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    /// M rows of K coefficients; failed replicates are rows of NaN.
    pub draws: Vec<Vec<f64>>,
    /// M rows of `[alpha, sg_ratio]`.
    pub theta_draws: Vec<[f64; 2]>,
    pub density_draws: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    /// Percentile intervals of `[alpha, sg_ratio]`.
    pub theta_ci: [(f64, f64); 2],
    pub failed: usize,
    pub replicates: usize,
    pub ci_level: f64,
    pub timing: BootstrapTiming,
}

impl BootstrapResult {
    /// Everything except wall-clock timings.
    pub fn same_estimates(&self, other: &Self) -> bool {
        self.draws.len() == other.draws.len()
            && self
                .draws
                .iter()
                .flatten()
                .zip(other.draws.iter().flatten())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.theta_draws == other.theta_draws
            && self.se == other.se
            && self.ci_lower == other.ci_lower
            && self.ci_upper == other.ci_upper
            && self.failed == other.failed
    }
}

fn summarize(
    outcomes: Vec<Result<ReplicateOutcome>>,
    k: usize,
    config: &BootstrapConfig,
    timing: BootstrapTiming,
) -> Result<BootstrapResult> {
    let m = outcomes.len();
    let mut draws = Vec::with_capacity(m);
    let mut theta_draws = Vec::with_capacity(m);
    let mut density_draws = Vec::with_capacity(m);
    let mut failed = 0;
    for o in outcomes {
        match o {
            Ok(o) if o.converged && o.beta.iter().all(|b| b.is_finite()) => {
                draws.push(o.beta);
                theta_draws.push([o.theta.alpha, o.theta.sg_ratio]);
                density_draws.push(o.f_m);
            }
            other => {
                if let Err(e) = &other {
                    log::debug!("bootstrap replicate failed: {e}");
                }
                failed += 1;
                draws.push(vec![f64::NAN; k]);
                theta_draws.push([f64::NAN; 2]);
                density_draws.push(f64::NAN);
            }
        }
    }
    if failed as f64 > MAX_FAILED_SHARE * m as f64 {
        return Err(Error::BootstrapUnreliable { failed, total: m });
    }

    let column = |j: usize| -> Vec<f64> {
        draws.iter().map(|d| d[j]).filter(|v| v.is_finite()).collect()
    };
    let mut se = Vec::with_capacity(k);
    let mut ci_lower = Vec::with_capacity(k);
    let mut ci_upper = Vec::with_capacity(k);
    for j in 0..k {
        let col = column(j);
        se.push(sample_sd(&col));
        let (lo, hi) = ci_percentile(&col, config.ci_level)?;
        ci_lower.push(lo);
        ci_upper.push(hi);
    }
    let theta_col = |j: usize| -> Vec<f64> {
        theta_draws.iter().map(|t| t[j]).filter(|v| v.is_finite()).collect()
    };
    let theta_ci = [
        ci_percentile(&theta_col(0), config.ci_level)?,
        ci_percentile(&theta_col(1), config.ci_level)?,
    ];
    Ok(BootstrapResult {
        draws,
        theta_draws,
        density_draws,
        se,
        ci_lower,
        ci_upper,
        theta_ci,
        failed,
        replicates: m,
        ci_level: config.ci_level,
        timing,
    })
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Percentile interval at `level` by linear-interpolation quantiles.
/// Needs at least `1 / (1 - level)` draws (and two).
pub fn ci_percentile(draws: &[f64], level: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::Input(format!("confidence level must lie in [0, 1), got {level}")));
    }
    let needed = ((1.0 / (1.0 - level)) - 1e-9).ceil().max(2.0) as usize;
    if draws.len() < needed {
        return Err(Error::Input(format!(
            "{} draws are too few for a {level} interval (need {needed})",
            draws.len()
        )));
    }
    if draws.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("interval draws must be finite".into()));
    }
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&s, tail), quantile_sorted(&s, 1.0 - tail)))
}
