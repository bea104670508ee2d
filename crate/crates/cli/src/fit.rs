//! `sfuqr fit`: resolve settings, run the analysis, write the result files.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use sfuqr::bootstrap::BootstrapConfig;
use sfuqr::eigen::{BasisMode, MoranReport};
use sfuqr::geometry::Kernel;
use sfuqr::model::{run_analysis, AnalysisReport, AnalysisSpec, BasisInfo, Mode, Timing};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::{self, FileConfig};
use crate::data::{assemble, Dataset, Schema, Table};
use crate::error::{CliError, CliResult};
use crate::output::{cell, write_csv, write_json};

#[derive(Debug, Clone, Default, Args)]
pub struct FitArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory [default: .]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML file with defaults for any of these options; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Response column [default: y]
    #[arg(long)]
    pub response: Option<String>,
    /// Comma-separated covariate columns [default: all other non-coordinate columns]
    #[arg(long)]
    pub covariates: Option<String>,
    /// Coordinate columns as `x,y` [default: coord_x,coord_y]
    #[arg(long)]
    pub coords: Option<String>,
    /// Comma-separated columns to log-transform before fitting.
    #[arg(long)]
    pub log: Option<String>,
    /// sfuqr, uqr, lm or reesf [default: sfuqr]
    #[arg(long)]
    pub mode: Option<String>,
    /// Quantile levels as `lo:hi:step` or a comma list [default: 0.05:0.95:0.05]
    #[arg(long)]
    pub taus: Option<String>,
    /// Bootstrap replicates, or `none` [default: 200]
    #[arg(long)]
    pub bootstrap: Option<String>,
    /// Seed for the bootstrap and anchor placement [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bootstrap worker threads [default: $SFUQR_THREADS, else all cores]
    #[arg(long)]
    pub workers: Option<usize>,
    /// exact or nystrom [default: exact]
    #[arg(long)]
    pub approx: Option<String>,
    /// Anchor count for the Nyström basis [default: 200]
    #[arg(long)]
    pub anchors: Option<usize>,
    /// Kernel range, `auto` (longest MST edge) or a positive value [default: auto]
    #[arg(long)]
    pub range: Option<String>,
    /// exponential or gaussian [default: exponential]
    #[arg(long)]
    pub kernel: Option<String>,
    /// Density bandwidth, `auto` (Silverman) or a positive value [default: auto]
    #[arg(long)]
    pub bandwidth: Option<String>,
    /// Maximum number of eigenvectors [default: 200]
    #[arg(long)]
    pub cap: Option<usize>,
    /// Confidence level of the reported intervals [default: 0.95]
    #[arg(long)]
    pub ci_level: Option<f64>,
    /// Keep the full-sample bandwidth inside bootstrap replicates.
    #[arg(long)]
    pub freeze_bandwidth: bool,
    /// Skip the residual Moran tests (they cost O(N^2) time).
    #[arg(long)]
    pub skip_moran: bool,
    /// Also write the eigenvectors used to basis.csv.
    #[arg(long)]
    pub export_basis: bool,
}

/// Fully resolved fit settings.
#[derive(Debug, Clone)]
pub struct FitPlan {
    pub input: PathBuf,
    pub out: PathBuf,
    pub schema: Schema,
    pub spec: AnalysisSpec,
    pub export_basis: bool,
    pub ci_level: f64,
}

fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

fn text(flag: Option<String>, file: Option<config::Scalar>) -> Option<String> {
    flag.or(file.map(|s| s.to_string()))
}

impl FitArgs {
    pub fn resolve(self) -> CliResult<FitPlan> {
        let file = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let input = pick(self.input, file.input)
            .ok_or_else(|| CliError::Input("no input file given (use --input)".into()))?;
        let out = pick(self.out, file.out).unwrap_or_else(|| PathBuf::from("."));

        let covariates = self.covariates.map(|s| config::split_list(&s)).or(file.covariates);
        let coords = match self.coords.map(|s| config::split_list(&s)).or(file.coords) {
            Some(c) => config::coord_pair(&c)?,
            None => ("coord_x".into(), "coord_y".into()),
        };
        let schema = Schema {
            response: pick(self.response, file.response).unwrap_or_else(|| "y".into()),
            covariates,
            coords,
            log: self.log.map(|s| config::split_list(&s)).or(file.log).unwrap_or_default(),
        };

        let mode = match pick(self.mode, file.mode) {
            Some(m) => config::parse_mode(&m)?,
            None => Mode::Sfuqr,
        };
        let seed = pick(self.seed, file.seed).unwrap_or(0);
        let workers = match pick(self.workers, file.workers) {
            Some(0) => return Err(CliError::Input("workers must be at least 1".into())),
            Some(w) => w,
            None => config::default_workers()?,
        };
        let ci_level = pick(self.ci_level, file.ci_level).unwrap_or(0.95);
        if !(ci_level > 0.0 && ci_level < 1.0) {
            return Err(CliError::Input(format!("ci-level must lie in (0, 1), got {ci_level}")));
        }
        let replicates = match text(self.bootstrap, file.bootstrap) {
            Some(b) => config::parse_bootstrap(&b)?,
            None => Some(200),
        };
        let freeze = self.freeze_bandwidth || file.freeze_bandwidth.unwrap_or(false);
        let bootstrap = replicates.map(|m| BootstrapConfig {
            replicates: m,
            seed,
            workers,
            ci_level,
            resample_density: true,
            freeze_bandwidth: freeze,
        });
        let anchors = pick(self.anchors, file.anchors).unwrap_or(200);
        let basis_mode = match pick(self.approx, file.approx) {
            Some(a) => config::parse_approx(&a, anchors, seed)?,
            None => BasisMode::Exact,
        };
        let taus = match text(self.taus, file.taus) {
            Some(t) => config::parse_taus(&t)?,
            None => sfuqr::model::default_taus(),
        };
        let cap = pick(self.cap, file.cap).unwrap_or(sfuqr::eigen::DEFAULT_CAP);
        if cap == 0 {
            return Err(CliError::Input("cap must be at least 1".into()));
        }
        let spec = AnalysisSpec {
            taus,
            mode,
            basis_mode,
            bootstrap,
            range: match text(self.range, file.range) {
                Some(r) => config::parse_range(&r)?,
                None => Default::default(),
            },
            kernel: match pick(self.kernel, file.kernel) {
                Some(k) => config::parse_kernel(&k)?,
                None => Kernel::Exponential,
            },
            bandwidth: match text(self.bandwidth, file.bandwidth) {
                Some(b) => config::parse_bandwidth(&b)?,
                None => Default::default(),
            },
            cap,
            moran_diagnostic: !(self.skip_moran || file.skip_moran.unwrap_or(false)),
        };
        Ok(FitPlan {
            input,
            out,
            schema,
            spec,
            export_basis: self.export_basis || file.export_basis.unwrap_or(false),
            ci_level,
        })
    }
}

#[derive(Debug, Serialize)]
struct BasisSummary {
    approximation: &'static str,
    anchors: Option<usize>,
    kernel: Kernel,
    #[serde(flatten)]
    info: BasisInfo,
}

#[derive(Debug, Serialize)]
struct MoranSummary {
    lm: Option<MoranReport>,
    model: Option<MoranReport>,
}

#[derive(Debug, Serialize)]
struct VifRow {
    variable: String,
    vif: f64,
}

#[derive(Debug, Serialize)]
struct AdjustedR2 {
    lm: f64,
    conditional: f64,
}

#[derive(Debug, Serialize)]
struct SigmaPoint {
    tau: Option<f64>,
    sigma: f64,
}

#[derive(Debug, Serialize)]
struct BootstrapEntry {
    tau: Option<f64>,
    failed: usize,
    mean_density: Option<f64>,
    wall_secs: f64,
}

#[derive(Debug, Serialize)]
struct BootstrapSummary {
    replicates: usize,
    seed: u64,
    workers: usize,
    ci_level: f64,
    resample_density: bool,
    freeze_bandwidth: bool,
    entries: Vec<BootstrapEntry>,
}

#[derive(Debug, Serialize)]
struct DiagnosticsFile {
    schema_version: u32,
    mode: &'static str,
    input: String,
    n_obs: usize,
    rows_dropped: usize,
    variables: Vec<String>,
    taus: Vec<f64>,
    basis: Option<BasisSummary>,
    residual_moran: MoranSummary,
    vif: Vec<VifRow>,
    adjusted_r2: AdjustedR2,
    sigma_path: Vec<SigmaPoint>,
    timing: Timing,
    bootstrap: Option<BootstrapSummary>,
    warnings: Vec<String>,
}

fn tau_cell(t: Option<f64>) -> String {
    t.map(|v| format!("{v}")).unwrap_or_default()
}

fn coefficient_rows(report: &AnalysisReport, variables: &[String], ci_level: f64) -> Vec<Vec<String>> {
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - (1.0 - ci_level) / 2.0);
    let mut rows = Vec::new();
    for e in &report.entries {
        let tau = tau_cell(e.tau.map(|t| t.tau()));
        let se = e.se();
        for (j, name) in variables.iter().enumerate() {
            let est = e.fit.beta[j];
            let (lo, hi) = match &e.bootstrap {
                Some(b) => (b.ci_lower[j], b.ci_upper[j]),
                None => (est - z * se[j], est + z * se[j]),
            };
            rows.push(vec![
                tau.clone(),
                name.clone(),
                cell(Some(est)),
                cell(Some(se[j])),
                cell(Some(lo)),
                cell(Some(hi)),
            ]);
        }
    }
    rows
}

fn spatial_rows(report: &AnalysisReport) -> Vec<Vec<String>> {
    let spatial = report.mode.is_spatial();
    report
        .entries
        .iter()
        .map(|e| {
            let sigma = e.fit.sigma();
            let sp = |v: f64| if spatial { cell(Some(v)) } else { String::new() };
            let (a_ci, sg_ci) = match (&e.bootstrap, spatial) {
                (Some(b), true) => (Some(b.theta_ci[0]), Some(b.theta_ci[1])),
                _ => (None, None),
            };
            vec![
                tau_cell(e.tau.map(|t| t.tau())),
                cell(Some(sigma)),
                sp(e.fit.sigma_gamma()),
                sp(e.fit.alpha),
                sp(e.fit.sg_ratio),
                cell(a_ci.map(|c| c.0)),
                cell(a_ci.map(|c| c.1)),
                cell(sg_ci.map(|c| c.0 * sigma)),
                cell(sg_ci.map(|c| c.1 * sigma)),
            ]
        })
        .collect()
}

fn diagnostics_file(plan: &FitPlan, data: &Dataset, report: &AnalysisReport) -> DiagnosticsFile {
    let spec = &plan.spec;
    let d = &report.diagnostics;
    DiagnosticsFile {
        schema_version: 1,
        mode: config::mode_name(report.mode),
        input: plan.input.display().to_string(),
        n_obs: data.rows_used,
        rows_dropped: data.rows_dropped,
        variables: data.variables.clone(),
        taus: report.entries.iter().filter_map(|e| e.tau.map(|t| t.tau())).collect(),
        basis: report.basis.clone().map(|info| BasisSummary {
            approximation: match spec.basis_mode {
                BasisMode::Exact => "exact",
                BasisMode::Nystrom { .. } => "nystrom",
            },
            anchors: match spec.basis_mode {
                BasisMode::Exact => None,
                BasisMode::Nystrom { anchors, .. } => Some(anchors.min(data.rows_used)),
            },
            kernel: spec.kernel,
            info,
        }),
        residual_moran: MoranSummary {
            lm: d.residual_moran_lm,
            model: d.residual_moran_reesf,
        },
        vif: data.variables[1..]
            .iter()
            .zip(&d.vif)
            .map(|(v, f)| VifRow { variable: v.clone(), vif: *f })
            .collect(),
        adjusted_r2: AdjustedR2 {
            lm: d.lm_adj_r2,
            conditional: d.conditional_adj_r2,
        },
        sigma_path: d.sigma_path.iter().map(|&(tau, sigma)| SigmaPoint { tau, sigma }).collect(),
        timing: report.timing,
        bootstrap: spec.bootstrap.map(|b| BootstrapSummary {
            replicates: b.replicates,
            seed: b.seed,
            workers: b.workers,
            ci_level: b.ci_level,
            resample_density: b.resample_density,
            freeze_bandwidth: b.freeze_bandwidth,
            entries: report
                .entries
                .iter()
                .filter_map(|e| {
                    e.bootstrap.as_ref().map(|r| {
                        let ok: Vec<f64> = r.density_draws.iter().copied().filter(|v| v.is_finite()).collect();
                        BootstrapEntry {
                            tau: e.tau.map(|t| t.tau()),
                            failed: r.failed,
                            mean_density: (!ok.is_empty() && report.mode.is_quantile())
                                .then(|| ok.iter().sum::<f64>() / ok.len() as f64),
                            wall_secs: r.timing.wall_secs,
                        }
                    })
                })
                .collect(),
        }),
        warnings: report.warnings.clone(),
    }
}

pub fn run(args: FitArgs) -> CliResult<()> {
    let plan = args.resolve()?;
    let table = Table::read(&plan.input)?;
    let data = assemble(&table, &plan.schema, plan.spec.mode.is_spatial())?;
    if data.rows_dropped > 0 {
        eprintln!("note: dropped {} rows with missing values", data.rows_dropped);
    }
    log::info!(
        "fitting {} on {} rows, {} coefficients",
        config::mode_name(plan.spec.mode),
        data.rows_used,
        data.variables.len()
    );
    let output = run_analysis(&data.y, &data.x, data.sites.as_ref(), &plan.spec)?;
    let report = &output.report;

    write_csv(
        &plan.out.join("coefficients.csv"),
        &["tau", "variable", "estimate", "se", "ci_lower", "ci_upper"],
        &coefficient_rows(report, &data.variables, plan.ci_level),
    )?;
    write_csv(
        &plan.out.join("spatial_params.csv"),
        &[
            "tau",
            "sigma",
            "sigma_gamma",
            "alpha",
            "sg_ratio",
            "alpha_ci_lower",
            "alpha_ci_upper",
            "sigma_gamma_ci_lower",
            "sigma_gamma_ci_upper",
        ],
        &spatial_rows(report),
    )?;
    write_json(&plan.out.join("diagnostics.json"), &diagnostics_file(&plan, &data, report))?;
    if plan.export_basis && !output.basis.is_empty() {
        let v = output.basis.vectors();
        let header: Vec<String> = (1..=v.ncols()).map(|l| format!("e{l}")).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = v
            .row_iter()
            .map(|r| r.iter().map(|x| cell(Some(*x))).collect())
            .collect();
        write_csv(&plan.out.join("basis.csv"), &header, &rows)?;
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "wrote {} entries for {} rows to {}",
        report.entries.len(),
        data.rows_used,
        plan.out.display()
    );
    Ok(())
}
