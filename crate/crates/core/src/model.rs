//! End-to-end analyses over a quantile grid plus model-level diagnostics.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bootstrap::{Bootstrap, BootstrapConfig, BootstrapResult, DensitySource};
use crate::eigen::{basis_from_sites, moran_z, BasisMode, EigenBasis, MoranReport, DEFAULT_CAP};
use crate::error::{Error, Result};
use crate::estimator::{fit_cached, fit_lm, fit_reesf, gram_cache, GramCache, Moments, QuantileFit};
use crate::geometry::{Kernel, KernelWeights, Range, SiteSet};
use crate::rif::{rif_vector, Bandwidth, DensityEstimate, QuantileSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Spatially filtered unconditional quantile regression.
    Sfuqr,
    /// Unconditional quantile regression without a spatial term.
    Uqr,
    /// Linear regression of the response.
    Lm,
    /// Mean random-effects eigenvector spatial filtering.
    Reesf,
}

impl Mode {
    pub fn is_spatial(self) -> bool {
        matches!(self, Mode::Sfuqr | Mode::Reesf)
    }

    pub fn is_quantile(self) -> bool {
        matches!(self, Mode::Sfuqr | Mode::Uqr)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSpec {
    pub taus: Vec<QuantileSpec>,
    pub mode: Mode,
    pub basis_mode: BasisMode,
    pub bootstrap: Option<BootstrapConfig>,
    pub range: Range,
    pub kernel: Kernel,
    pub bandwidth: Bandwidth,
    pub cap: usize,
    /// Compute residual Moran statistics (O(N^2) time, O(N) memory).
    pub moran_diagnostic: bool,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            taus: default_taus(),
            mode: Mode::Sfuqr,
            basis_mode: BasisMode::Exact,
            bootstrap: Some(BootstrapConfig::default()),
            range: Range::Auto,
            kernel: Kernel::Exponential,
            bandwidth: Bandwidth::Auto,
            cap: DEFAULT_CAP,
            moran_diagnostic: true,
        }
    }
}

impl AnalysisSpec {
    fn validate(&self) -> Result<()> {
        if self.mode.is_quantile() {
            if self.taus.is_empty() {
                return Err(Error::Input("at least one quantile level is required".into()));
            }
            if self.taus.windows(2).any(|w| w[1].tau() <= w[0].tau()) {
                return Err(Error::Input("quantile levels must be strictly increasing".into()));
            }
        }
        Ok(())
    }
}

/// `{0.05, 0.10, ..., 0.95}`
pub fn default_taus() -> Vec<QuantileSpec> {
    tau_grid(0.05, 0.95, 0.05).expect("default grid is valid")
}

/// Inclusive grid `lo, lo + step, ..., hi` (endpoint kept within rounding).
pub fn tau_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<QuantileSpec>> {
    if !(step > 0.0) || !(hi >= lo) {
        return Err(Error::Input(format!("invalid quantile grid {lo}:{hi}:{step}")));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    (0..count)
        .map(|i| {
            // round to 12 decimals so 0.05 * 3 prints as 0.15
            let t = ((lo + i as f64 * step) * 1e12).round() / 1e12;
            QuantileSpec::new(t)
        })
        .collect()
}

/// Fit (and optional bootstrap) for one quantile, or for the mean model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauEntry {
    pub tau: Option<QuantileSpec>,
    pub q_hat: Option<f64>,
    pub density: Option<DensityEstimate>,
    pub fit: QuantileFit,
    pub bootstrap: Option<BootstrapResult>,
}

impl TauEntry {
    /// Bootstrap standard errors when available, analytic ones otherwise.
    pub fn se(&self) -> &[f64] {
        match &self.bootstrap {
            Some(b) => &b.se,
            None => &self.fit.se,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    /// Moran test on linear-regression residuals of the response.
    pub residual_moran_lm: Option<MoranReport>,
    /// Moran test on residuals of the mean spatial model.
    pub residual_moran_reesf: Option<MoranReport>,
    pub vif: Vec<f64>,
    pub lm_adj_r2: f64,
    /// Conditional adjusted R^2 of the mean spatial model (LM value for
    /// non-spatial modes).
    pub conditional_adj_r2: f64,
    /// `(tau, sigma_hat)` for each fitted entry.
    pub sigma_path: Vec<(Option<f64>, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Timing {
    pub eigen_secs: f64,
    pub estimation_secs: f64,
    /// Cross-product cache built before any replicate.
    pub bootstrap_precompute_secs: f64,
    pub bootstrap_secs: f64,
    /// Mean single-replicate time across all bootstrapped entries.
    pub bootstrap_per_replicate_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasisInfo {
    pub exact: bool,
    pub available: usize,
    pub used: usize,
    pub range: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub mode: Mode,
    pub entries: Vec<TauEntry>,
    pub diagnostics: Diagnostics,
    pub timing: Timing,
    pub basis: Option<BasisInfo>,
    pub warnings: Vec<String>,
}

/// Variance inflation factors of every non-intercept column.
pub fn vif(x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let k = x.ncols();
    let mut out = Vec::with_capacity(k.saturating_sub(1));
    for j in 1..k {
        let target: Vec<f64> = x.column(j).iter().copied().collect();
        let others = x.clone().remove_column(j);
        let fit = fit_lm(&target, &others)?;
        let fitted = &others * DVector::from_column_slice(&fit.beta);
        let mean = target.iter().sum::<f64>() / target.len() as f64;
        let tss: f64 = target.iter().map(|v| (v - mean).powi(2)).sum();
        let rss: f64 = target.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        let r2 = 1.0 - rss / tss;
        if !(tss > 0.0) || r2 >= 1.0 - 1e-12 {
            return Err(Error::Collinearity { columns: vec![j] });
        }
        out.push(1.0 / (1.0 - r2));
    }
    Ok(out)
}

fn residuals(y: &[f64], x: &DMatrix<f64>, fit: &QuantileFit, basis: &EigenBasis) -> Vec<f64> {
    let mut fitted = x * DVector::from_column_slice(&fit.beta);
    if !basis.is_empty() {
        fitted += basis.vectors() * DVector::from_column_slice(&fit.gamma);
    }
    y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect()
}

/// Adjusted R^2 counting `K` fixed effects plus the effective degrees of
/// freedom of the random-effect block.
pub fn conditional_adj_r2(y: &[f64], fit: &QuantileFit, x: &DMatrix<f64>, basis: &EigenBasis) -> Result<f64> {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if !(tss > 0.0) {
        return Err(Error::Input("adjusted R^2 is undefined for a constant response".into()));
    }
    let rss: f64 = residuals(y, x, fit, basis).iter().map(|r| r * r).sum();
    let r2 = 1.0 - rss / tss;
    let dof = x.ncols() as f64 + fit.random_edf;
    Ok(1.0 - (1.0 - r2) * (n - 1.0) / (n - dof))
}

fn check_data(y: &[f64], x: &DMatrix<f64>, sites: Option<&SiteSet>) -> Result<()> {
    if y.len() != x.nrows() {
        return Err(Error::Input(format!(
            "response has {} rows but design has {}",
            y.len(),
            x.nrows()
        )));
    }
    if let Some(s) = sites {
        if s.len() != y.len() {
            return Err(Error::Input(format!(
                "{} sites for {} observations",
                s.len(),
                y.len()
            )));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("response contains non-finite values".into()));
    }
    Ok(())
}

/// Pipeline step an error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Input,
    Eigen,
    Estimation,
    Bootstrap,
    Diagnostics,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Input => "input validation",
            Stage::Eigen => "eigen-decomposition",
            Stage::Estimation => "estimation",
            Stage::Bootstrap => "bootstrap",
            Stage::Diagnostics => "diagnostics",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

type Staged<T> = std::result::Result<T, StageError>;

/// Per-entry fits on a shared basis and cache. Returns entries and the
/// accumulated (estimation, bootstrap, per-replicate) seconds.
fn fit_entries(
    y: &[f64],
    x: &DMatrix<f64>,
    basis: &EigenBasis,
    gram: &GramCache,
    spec: &AnalysisSpec,
) -> Staged<(Vec<TauEntry>, f64, f64, f64)> {
    let mut entries = Vec::new();
    let (mut est_secs, mut boot_secs, mut rep_secs, mut rep_count) = (0.0, 0.0, 0.0, 0usize);
    let targets: Vec<Option<QuantileSpec>> = if spec.mode.is_quantile() {
        spec.taus.iter().copied().map(Some).collect()
    } else {
        vec![None]
    };
    for tau in targets {
        let t0 = Instant::now();
        let (response, q_hat, density) = match tau {
            Some(t) => {
                let r = rif_vector(y, t, spec.bandwidth).at(Stage::Estimation)?;
                (r.values, Some(r.q_hat), Some(r.density))
            }
            None => (y.to_vec(), None, None),
        };
        let moments = Moments::new(x, basis, &response).at(Stage::Estimation)?;
        let mut fit = fit_cached(gram, &moments).at(Stage::Estimation)?;
        fit.tau = tau;
        est_secs += t0.elapsed().as_secs_f64();

        let bootstrap = match &spec.bootstrap {
            Some(cfg) => {
                let t1 = Instant::now();
                let source = match (q_hat, density) {
                    (Some(q_hat), Some(d)) => Some(DensitySource {
                        y,
                        q_hat,
                        f_hat: d.value_at_quantile,
                        bandwidth: d.bandwidth,
                    }),
                    _ => None,
                };
                let res = Bootstrap::new(&fit, gram, basis, x, source)
                    .and_then(|b| b.run(cfg))
                    .at(Stage::Bootstrap)?;
                boot_secs += t1.elapsed().as_secs_f64();
                rep_secs += res.timing.mean_replicate_secs;
                rep_count += 1;
                Some(res)
            }
            None => None,
        };
        entries.push(TauEntry {
            tau,
            q_hat,
            density,
            fit,
            bootstrap,
        });
    }
    let per_rep = if rep_count > 0 { rep_secs / rep_count as f64 } else { 0.0 };
    Ok((entries, est_secs, boot_secs, per_rep))
}

/// Report plus the basis it was computed on (empty for non-spatial modes).
#[derive(Debug, Clone)]
pub struct AnalysisOutput {
    pub report: AnalysisReport,
    pub basis: EigenBasis,
}

/// Runs the analysis selected by `spec.mode`. Spatial modes need `sites`.
pub fn analyze(y: &[f64], x: &DMatrix<f64>, sites: Option<&SiteSet>, spec: &AnalysisSpec) -> Result<AnalysisReport> {
    run_analysis(y, x, sites, spec).map(|o| o.report).map_err(|e| e.error)
}

/// [`analyze`] that also returns the basis and tags errors with the stage
/// that raised them.
pub fn run_analysis(
    y: &[f64],
    x: &DMatrix<f64>,
    sites: Option<&SiteSet>,
    spec: &AnalysisSpec,
) -> Staged<AnalysisOutput> {
    spec.validate().at(Stage::Input)?;
    check_data(y, x, sites).at(Stage::Input)?;
    let mut timing = Timing::default();
    let mut warnings = Vec::new();

    let t0 = Instant::now();
    let (basis, range) = match (spec.mode.is_spatial(), sites) {
        (true, None) => {
            return Err(Error::Input(format!(
                "{:?} mode requires site coordinates",
                spec.mode
            )))
            .at(Stage::Input)
        }
        (true, Some(s)) => {
            let (b, r) = basis_from_sites(s, spec.basis_mode, spec.range, spec.kernel, spec.cap)
                .map_err(|e| match e {
                    Error::NoPositivePattern => Error::Input(
                        "the connectivity has no positive spatial pattern (too few or degenerate sites); use the non-spatial uqr mode".into(),
                    ),
                    e => e,
                })
                .at(Stage::Eigen)?;
            (b, Some(r))
        }
        (false, Some(s)) if spec.moran_diagnostic => {
            (EigenBasis::empty(y.len()), Some(spec.range.resolve(s).at(Stage::Input)?))
        }
        _ => (EigenBasis::empty(y.len()), None),
    };
    timing.eigen_secs = t0.elapsed().as_secs_f64();

    let (entries, mut diagnostics) = staged_fits(y, x, &basis, spec, &mut timing, &mut warnings)?;

    if spec.moran_diagnostic {
        if let (Some(s), Some(r)) = (sites, range) {
            let w = KernelWeights { sites: s, range: r, kernel: spec.kernel };
            let empty = EigenBasis::empty(y.len());
            let lm = fit_lm(y, x).at(Stage::Diagnostics)?;
            diagnostics.residual_moran_lm = moran_z(&residuals(y, x, &lm, &empty), &w).at(Stage::Diagnostics).ok();
            if spec.mode.is_spatial() {
                let mean_fit = fit_reesf(y, x, &basis).at(Stage::Diagnostics)?;
                diagnostics.residual_moran_reesf =
                    moran_z(&residuals(y, x, &mean_fit, &basis), &w).at(Stage::Diagnostics).ok();
            }
        }
    }

    if spec.bootstrap.is_none() && spec.mode.is_quantile() {
        warnings.push(
            "no bootstrap: reported standard errors are analytic and ignore density uncertainty, so they are anticonservative"
                .into(),
        );
    }
    for e in &entries {
        if !e.fit.converged {
            warnings.push(format!(
                "variance-parameter search did not converge at tau = {:?}",
                e.tau.map(|t| t.tau())
            ));
        }
        if let Some(b) = &e.bootstrap {
            if b.failed > 0 {
                warnings.push(format!(
                    "{} of {} bootstrap replicates failed at tau = {:?}",
                    b.failed,
                    b.replicates,
                    e.tau.map(|t| t.tau())
                ));
            }
        }
    }

    let report = AnalysisReport {
        mode: spec.mode,
        entries,
        diagnostics,
        timing,
        basis: spec.mode.is_spatial().then(|| BasisInfo {
            exact: basis.is_exact(),
            available: basis.available(),
            used: basis.len(),
            range,
        }),
        warnings,
    };
    Ok(AnalysisOutput { report, basis })
}

/// Fits every entry on a prebuilt basis (ignored for non-spatial modes) and
/// computes the basis-independent diagnostics.
pub fn analyze_with_basis(
    y: &[f64],
    x: &DMatrix<f64>,
    basis: &EigenBasis,
    spec: &AnalysisSpec,
    timing: &mut Timing,
    warnings: &mut Vec<String>,
) -> Result<(Vec<TauEntry>, Diagnostics)> {
    spec.validate()?;
    check_data(y, x, None)?;
    staged_fits(y, x, basis, spec, timing, warnings).map_err(|e| e.error)
}

fn staged_fits(
    y: &[f64],
    x: &DMatrix<f64>,
    basis: &EigenBasis,
    spec: &AnalysisSpec,
    timing: &mut Timing,
    warnings: &mut Vec<String>,
) -> Staged<(Vec<TauEntry>, Diagnostics)> {
    let basis_for_mode;
    let basis = if spec.mode.is_spatial() {
        basis
    } else {
        basis_for_mode = EigenBasis::empty(y.len());
        &basis_for_mode
    };

    let t0 = Instant::now();
    let gram = gram_cache(x, basis).at(Stage::Input)?;
    timing.bootstrap_precompute_secs = t0.elapsed().as_secs_f64();

    let (entries, est, boot, per_rep) = fit_entries(y, x, basis, &gram, spec)?;
    timing.estimation_secs = est;
    timing.bootstrap_secs = boot;
    timing.bootstrap_per_replicate_secs = per_rep;

    let empty = EigenBasis::empty(y.len());
    let lm = fit_lm(y, x).at(Stage::Diagnostics)?;
    let lm_adj_r2 = conditional_adj_r2(y, &lm, x, &empty).at(Stage::Diagnostics)?;
    let conditional = if spec.mode.is_spatial() && !basis.is_empty() {
        let mean_fit = if spec.mode == Mode::Reesf {
            entries[0].fit.clone()
        } else {
            fit_reesf(y, x, basis).at(Stage::Diagnostics)?
        };
        conditional_adj_r2(y, &mean_fit, x, basis).at(Stage::Diagnostics)?
    } else {
        lm_adj_r2
    };
    let vif = match vif(x) {
        Ok(v) => v,
        Err(e) => {
            warnings.push(format!("VIF unavailable: {e}"));
            Vec::new()
        }
    };
    let sigma_path = entries
        .iter()
        .map(|e| (e.tau.map(|t| t.tau()), e.fit.sigma()))
        .collect();
    Ok((
        entries,
        Diagnostics {
            residual_moran_lm: None,
            residual_moran_reesf: None,
            vif,
            lm_adj_r2,
            conditional_adj_r2: conditional,
            sigma_path,
        },
    ))
}

/// Spatially filtered UQR over `spec.taus`.
pub fn fit_sfuqr(y: &[f64], x: &DMatrix<f64>, sites: &SiteSet, spec: &AnalysisSpec) -> Result<AnalysisReport> {
    analyze(y, x, Some(sites), &AnalysisSpec { mode: Mode::Sfuqr, ..spec.clone() })
}

/// Plain UQR (RIF regressed on covariates by OLS) over `spec.taus`.
pub fn fit_uqr(y: &[f64], x: &DMatrix<f64>, spec: &AnalysisSpec) -> Result<AnalysisReport> {
    analyze(y, x, None, &AnalysisSpec { mode: Mode::Uqr, ..spec.clone() })
}
