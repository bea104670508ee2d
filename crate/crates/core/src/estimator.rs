//! Type-II REML estimation of the low-rank spatial random-effects model
//!
//! ```text
//! r = X beta + E V(theta) u + eps,   u ~ N(0, s2 I_L),   eps ~ N(0, s2 I_N)
//! V(theta) = sg_ratio * Lambda(alpha)^(1/2)
//! ```
//!
//! Everything here works from cached cross-products (`X'X`, `E'X`, `E'E`)
//! and per-response moments (`X'r`, `E'r`, `r'r`), so a likelihood
//! evaluation costs `O((K+L)^3)` at most and nothing that scales with N.
//! The `(K+L)` block system is reduced through the Schur complement of its
//! random-effect block: diagonal on exact (orthonormal) bases, a dense
//! Cholesky factor on Nyström bases.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::eigen::EigenBasis;
use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, cholesky_or_ridge, collinear_columns, dvec};
use crate::optim::NelderMead;
use crate::rif::QuantileSpec;

pub const ALPHA_MIN: f64 = 0.01;
pub const ALPHA_MAX: f64 = 100.0;
pub const SG_RATIO_MAX: f64 = 1e3;
/// Smallest interior `sg_ratio` the optimiser explores; zero is checked separately.
const SG_RATIO_FLOOR: f64 = 1e-6;
const MAX_EVALS: usize = 500;
const F_TOL: f64 = 1e-6;

/// Spatial variance parameters `(alpha, sigma_gamma / sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpatialVariance {
    pub alpha: f64,
    pub sg_ratio: f64,
}

impl SpatialVariance {
    pub fn new(alpha: f64, sg_ratio: f64) -> Result<Self> {
        if !(ALPHA_MIN..=ALPHA_MAX).contains(&alpha) {
            return Err(Error::Input(format!(
                "alpha must lie in [{ALPHA_MIN}, {ALPHA_MAX}], got {alpha}"
            )));
        }
        if !(0.0..=SG_RATIO_MAX).contains(&sg_ratio) {
            return Err(Error::Input(format!(
                "sg_ratio must lie in [0, {SG_RATIO_MAX}], got {sg_ratio}"
            )));
        }
        Ok(Self { alpha, sg_ratio })
    }

    /// The model without a spatial term.
    pub fn none() -> Self {
        Self {
            alpha: 1.0,
            sg_ratio: 0.0,
        }
    }
}

/// `Lambda(alpha) = (sum lambda / sum lambda^alpha) Lambda^alpha`, computed
/// relative to the largest eigenvalue so large exponents do not overflow.
pub fn lambda_alpha(values: &[f64], alpha: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    if alpha == 1.0 {
        return values.to_vec();
    }
    let top = values.iter().fold(0.0f64, |m, v| m.max(*v));
    let scaled: Vec<f64> = values.iter().map(|v| (v / top).powf(alpha)).collect();
    let norm = values.iter().sum::<f64>() / scaled.iter().sum::<f64>();
    scaled.into_iter().map(|s| s * norm).collect()
}

/// Diagonal of `V(theta) = sg_ratio * Lambda(alpha)^(1/2)`.
pub fn v_matrix(theta: SpatialVariance, values: &[f64]) -> Vec<f64> {
    lambda_alpha(values, theta.alpha)
        .into_iter()
        .map(|v| theta.sg_ratio * v.sqrt())
        .collect()
}

/// Cross-products of the design and the basis.
#[derive(Debug, Clone, PartialEq)]
pub struct GramCache {
    pub m_xx: DMatrix<f64>,
    pub m_ex: DMatrix<f64>,
    pub m_ee: DMatrix<f64>,
    pub n: usize,
    pub k: usize,
    pub l: usize,
    /// Basis columns are orthonormal, so `V M_EE V = V^2`.
    pub orthonormal: bool,
    values: Vec<f64>,
}

impl GramCache {
    /// Eigenvalues of the basis the cache was built from.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.values
    }
}

fn check_design(x: &DMatrix<f64>) -> Result<()> {
    let (n, k) = x.shape();
    if k == 0 {
        return Err(Error::Input("design matrix has no columns".into()));
    }
    if n <= k {
        return Err(Error::Input(format!(
            "need more observations ({n}) than covariates ({k})"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("design matrix contains non-finite values".into()));
    }
    if x.column(0).iter().any(|&v| v != 1.0) {
        return Err(Error::Input("first design column must be the intercept (all ones)".into()));
    }
    let bad = collinear_columns(x);
    if !bad.is_empty() {
        return Err(Error::Collinearity { columns: bad });
    }
    Ok(())
}

/// `X'X`, `E'X`, `E'E`, paid once per design/basis pair.
pub fn gram_cache(x: &DMatrix<f64>, basis: &EigenBasis) -> Result<GramCache> {
    check_design(x)?;
    if basis.n() != x.nrows() {
        return Err(Error::Input(format!(
            "basis has {} rows but design has {}",
            basis.n(),
            x.nrows()
        )));
    }
    let e = basis.vectors();
    let m_ee = e.tr_mul(e);
    let orthonormal = basis.is_exact() || (&m_ee - DMatrix::<f64>::identity(basis.len(), basis.len())).amax() <= 1e-10;
    Ok(GramCache {
        m_xx: x.tr_mul(x),
        m_ex: e.tr_mul(x),
        m_ee,
        n: x.nrows(),
        k: x.ncols(),
        l: basis.len(),
        orthonormal,
        values: basis.values().to_vec(),
    })
}

/// Per-response moments `X'r`, `E'r`, `r'r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m_x: DVector<f64>,
    pub m_e: DVector<f64>,
    pub r_sq: f64,
}

impl Moments {
    pub fn new(x: &DMatrix<f64>, basis: &EigenBasis, r: &[f64]) -> Result<Self> {
        if r.len() != x.nrows() || r.len() != basis.n() {
            return Err(Error::Input(format!(
                "response length {} does not match design rows {}",
                r.len(),
                x.nrows()
            )));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("response contains non-finite values".into()));
        }
        let r = dvec(r);
        Ok(Self {
            m_x: x.tr_mul(&r),
            m_e: basis.vectors().tr_mul(&r),
            r_sq: r.dot(&r),
        })
    }
}

enum RandomBlock {
    /// `V^2 + I`
    Diagonal(Vec<f64>),
    /// `V M_EE V + I`
    Dense(Cholesky<f64, Dyn>),
}

impl RandomBlock {
    fn solve_mut(&self, m: &mut DMatrix<f64>) {
        match self {
            RandomBlock::Diagonal(d) => {
                for (i, mut row) in m.row_iter_mut().enumerate() {
                    row /= d[i];
                }
            }
            RandomBlock::Dense(c) => c.solve_mut(m),
        }
    }

    fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            RandomBlock::Diagonal(d) => DVector::from_iterator(v.len(), v.iter().zip(d).map(|(a, b)| a / b)),
            RandomBlock::Dense(c) => c.solve(v),
        }
    }

    fn logdet(&self) -> f64 {
        match self {
            RandomBlock::Diagonal(d) => d.iter().map(|v| v.ln()).sum(),
            RandomBlock::Dense(c) => chol_logdet(c),
        }
    }
}

/// The `(K+L)` mixed-model system at one `theta`, factorised.
struct BlockSystem<'a> {
    gram: &'a GramCache,
    v: Vec<f64>,
    random: RandomBlock,
    /// `V M_EX`, L x K
    b: DMatrix<f64>,
    /// `D^{-1} V M_EX`
    dinv_b: DMatrix<f64>,
    schur: Cholesky<f64, Dyn>,
}

impl<'a> BlockSystem<'a> {
    fn new(gram: &'a GramCache, theta: SpatialVariance) -> Result<Self> {
        let v = v_matrix(theta, &gram.values);
        let mut b = gram.m_ex.clone();
        for (i, mut row) in b.row_iter_mut().enumerate() {
            row *= v[i];
        }
        let random = if gram.orthonormal {
            RandomBlock::Diagonal(v.iter().map(|x| x * x + 1.0).collect())
        } else {
            let l = gram.l;
            let d = DMatrix::from_fn(l, l, |i, j| {
                v[i] * gram.m_ee[(i, j)] * v[j] + if i == j { 1.0 } else { 0.0 }
            });
            RandomBlock::Dense(cholesky_or_ridge(&d)?)
        };
        let mut dinv_b = b.clone();
        random.solve_mut(&mut dinv_b);
        let schur = &gram.m_xx - b.tr_mul(&dinv_b);
        let schur = cholesky_or_ridge(&schur)?;
        Ok(Self {
            gram,
            v,
            random,
            b,
            dinv_b,
            schur,
        })
    }

    /// `log |A|` of the full block matrix.
    fn logdet(&self) -> f64 {
        self.random.logdet() + chol_logdet(&self.schur)
    }

    /// Solves `A [beta; u] = [m_x; V m_e]`.
    fn solve(&self, m: &Moments) -> (DVector<f64>, DVector<f64>) {
        let b_u = self.scale_by_v(&m.m_e);
        let w = self.random.solve_vec(&b_u);
        let beta = self.schur.solve(&(&m.m_x - self.b.tr_mul(&w)));
        let u = w - &self.dinv_b * &beta;
        (beta, u)
    }

    fn scale_by_v(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(x.len(), x.iter().zip(&self.v).map(|(a, b)| a * b))
    }

    /// Residual sum of squares from moments alone:
    /// `r'r - 2 s'[m_x; V m_e] + s' A0 s` with `A0` the block matrix without `I_L`.
    fn residual_ss(&self, m: &Moments, beta: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let vme = self.scale_by_v(&m.m_e);
        let cross = beta.dot(&m.m_x) + u.dot(&vme);
        let vu = self.scale_by_v(u);
        let ee_term = if self.gram.orthonormal {
            vu.dot(&vu)
        } else {
            vu.dot(&(&self.gram.m_ee * &vu))
        };
        let quad = beta.dot(&(&self.gram.m_xx * beta)) + 2.0 * u.dot(&(&self.b * beta)) + ee_term;
        (m.r_sq - 2.0 * cross + quad).max(0.0)
    }

    /// Leading K x K block of `A^{-1}`.
    fn fixed_inverse(&self) -> DMatrix<f64> {
        self.schur.inverse()
    }

    /// `tr` of the random-effect block of `A^{-1}`.
    fn random_inverse_trace(&self) -> f64 {
        let l = self.gram.l;
        let dinv_trace = match &self.random {
            RandomBlock::Diagonal(d) => d.iter().map(|x| 1.0 / x).sum::<f64>(),
            RandomBlock::Dense(c) => c.inverse().trace(),
        };
        if l == 0 {
            return 0.0;
        }
        // tr(D^-1 + D^-1 B S^-1 B' D^-1) = tr(D^-1) + tr(S^-1 (D^-1 B)'(D^-1 B))
        let g = self.dinv_b.tr_mul(&self.dinv_b);
        dinv_trace + (self.schur.inverse() * g).trace()
    }
}

fn check_moments(gram: &GramCache, m: &Moments) -> Result<()> {
    if m.m_x.len() != gram.k || m.m_e.len() != gram.l {
        return Err(Error::Input(format!(
            "moment sizes ({}, {}) do not match cache (K={}, L={})",
            m.m_x.len(),
            m.m_e.len(),
            gram.k,
            gram.l
        )));
    }
    Ok(())
}

/// Solves the mixed-model equations for `(beta, u)` at fixed `theta`.
pub fn gls_solve(
    gram: &GramCache,
    moments: &Moments,
    theta: SpatialVariance,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_moments(gram, moments)?;
    let sys = BlockSystem::new(gram, theta)?;
    let (beta, u) = sys.solve(moments);
    Ok((beta.as_slice().to_vec(), u.as_slice().to_vec()))
}

fn loglik_from(sys: &BlockSystem, m: &Moments, n: usize, k: usize) -> (f64, DVector<f64>, DVector<f64>, f64) {
    let (beta, u) = sys.solve(m);
    let rss = sys.residual_ss(m, &beta, &u);
    let d = (rss + u.dot(&u)).max(f64::MIN_POSITIVE);
    let dof = (n - k) as f64;
    let ll = -0.5 * sys.logdet() - 0.5 * dof * (1.0 + (2.0 * PI * d / dof).ln());
    (ll, beta, u, rss)
}

/// Profile restricted log-likelihood at `theta`, from cached moments only.
pub fn restricted_loglik(gram: &GramCache, moments: &Moments, theta: SpatialVariance) -> Result<f64> {
    check_moments(gram, moments)?;
    let sys = BlockSystem::new(gram, theta)?;
    Ok(loglik_from(&sys, moments, gram.n, gram.k).0)
}

/// Residual sum of squares `||r - X beta - E V u||^2` at the GLS solution,
/// computed from moments.
pub fn residual_ss(gram: &GramCache, moments: &Moments, theta: SpatialVariance) -> Result<f64> {
    check_moments(gram, moments)?;
    let sys = BlockSystem::new(gram, theta)?;
    let (beta, u) = sys.solve(moments);
    Ok(sys.residual_ss(moments, &beta, &u))
}

/// Outcome of the `theta` search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaEstimate {
    pub theta: SpatialVariance,
    pub loglik: f64,
    pub converged: bool,
    pub evals: usize,
}

fn theta_from_log(p: &[f64]) -> SpatialVariance {
    SpatialVariance {
        alpha: p[0].clamp(ALPHA_MIN.ln(), ALPHA_MAX.ln()).exp(),
        sg_ratio: p[1].clamp(SG_RATIO_FLOOR.ln(), SG_RATIO_MAX.ln()).exp(),
    }
}

/// Maximises the restricted likelihood over `(log alpha, log sg_ratio)` with
/// Nelder–Mead (one restart from the best vertex), then compares against
/// the `sg_ratio = 0` boundary.
pub fn optimize_theta(gram: &GramCache, moments: &Moments) -> Result<ThetaEstimate> {
    check_moments(gram, moments)?;
    let boundary = restricted_loglik(gram, moments, SpatialVariance::none())?;
    if gram.l == 0 {
        return Ok(ThetaEstimate {
            theta: SpatialVariance::none(),
            loglik: boundary,
            converged: true,
            evals: 1,
        });
    }

    let objective = |p: &[f64]| -> f64 {
        match BlockSystem::new(gram, theta_from_log(p)) {
            Ok(sys) => -loglik_from(&sys, moments, gram.n, gram.k).0,
            Err(_) => f64::INFINITY,
        }
    };
    let first = NelderMead {
        max_evals: MAX_EVALS,
        f_tol: F_TOL,
        initial_step: 1.0,
    }
    .minimize(&[0.0, 0.0], objective);
    let remaining = MAX_EVALS.saturating_sub(first.evals).max(40);
    let second = NelderMead {
        max_evals: remaining,
        f_tol: F_TOL * 1e-3,
        initial_step: 0.25,
    }
    .minimize(&first.point, objective);
    let best = if second.value <= first.value { &second } else { &first };
    let evals = first.evals + second.evals;
    let converged = first.converged || second.converged;
    if !converged {
        log::warn!("theta search did not converge within {evals} evaluations; returning best point");
    }

    let interior = -best.value;
    if !(interior.is_finite()) || boundary >= interior {
        return Ok(ThetaEstimate {
            theta: SpatialVariance::none(),
            loglik: boundary,
            converged,
            evals: evals + 1,
        });
    }
    Ok(ThetaEstimate {
        theta: theta_from_log(&best.point),
        loglik: interior,
        converged,
        evals: evals + 1,
    })
}

/// Fitted parameters for one quantile (or for the mean model when `tau` is `None`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileFit {
    pub tau: Option<QuantileSpec>,
    pub beta: Vec<f64>,
    /// Analytic standard errors from the leading block of the inverse system.
    pub se: Vec<f64>,
    pub u: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma2: f64,
    pub sigma_gamma2: f64,
    pub alpha: f64,
    pub sg_ratio: f64,
    pub restricted_loglik: f64,
    /// Effective degrees of freedom of the random-effect block, `L - tr(A^{-1}_uu)`.
    pub random_edf: f64,
    pub converged: bool,
}

impl QuantileFit {
    pub fn theta(&self) -> SpatialVariance {
        SpatialVariance {
            alpha: self.alpha,
            sg_ratio: self.sg_ratio,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    pub fn sigma_gamma(&self) -> f64 {
        self.sigma_gamma2.sqrt()
    }
}

/// Fits at a given `theta` using cached quantities only.
pub fn fit_at_theta(
    gram: &GramCache,
    moments: &Moments,
    theta: SpatialVariance,
) -> Result<QuantileFit> {
    check_moments(gram, moments)?;
    let sys = BlockSystem::new(gram, theta)?;
    let (ll, beta, u, rss) = loglik_from(&sys, moments, gram.n, gram.k);
    let sigma2 = rss / (gram.n - gram.k) as f64;
    let cov = sys.fixed_inverse();
    let se = (0..gram.k).map(|i| (sigma2 * cov[(i, i)]).max(0.0).sqrt()).collect();
    let gamma = sys.scale_by_v(&u);
    let random_edf = gram.l as f64 - sys.random_inverse_trace();
    Ok(QuantileFit {
        tau: None,
        beta: beta.as_slice().to_vec(),
        se,
        u: u.as_slice().to_vec(),
        gamma: gamma.as_slice().to_vec(),
        sigma2,
        sigma_gamma2: theta.sg_ratio * theta.sg_ratio * sigma2,
        alpha: theta.alpha,
        sg_ratio: theta.sg_ratio,
        restricted_loglik: ll,
        random_edf,
        converged: true,
    })
}

/// Full REML fit from cached quantities: search `theta`, then solve at it.
pub fn fit_cached(gram: &GramCache, moments: &Moments) -> Result<QuantileFit> {
    let est = optimize_theta(gram, moments)?;
    let mut fit = fit_at_theta(gram, moments, est.theta)?;
    fit.converged = est.converged;
    Ok(fit)
}

/// REML fit of `r` on `X` plus the spatial random effect spanned by `basis`.
pub fn fit_reesf(r: &[f64], x: &DMatrix<f64>, basis: &EigenBasis) -> Result<QuantileFit> {
    let gram = gram_cache(x, basis)?;
    let moments = Moments::new(x, basis, r)?;
    fit_cached(&gram, &moments)
}

/// Ordinary least squares with classical standard errors.
pub fn fit_lm(y: &[f64], x: &DMatrix<f64>) -> Result<QuantileFit> {
    let basis = EigenBasis::empty(x.nrows());
    let gram = gram_cache(x, &basis)?;
    let moments = Moments::new(x, &basis, y)?;
    fit_at_theta(&gram, &moments, SpatialVariance::none())
}
