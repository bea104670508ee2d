//! `sfuqr simulate`: draw a synthetic data set and write it as input CSV.

use std::path::PathBuf;

use clap::Args;
use sfuqr::eigen::BasisMode;
use sfuqr::simdata::{generate, SimSpec};

use crate::config;
use crate::error::{CliError, CliResult};
use crate::output::{cell, write_csv};

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated coefficients, intercept first.
    #[arg(long, default_value = "1,2,-1")]
    pub beta: String,
    /// sigma_gamma / sigma
    #[arg(long, default_value_t = 1.0)]
    pub sg_ratio: f64,
    /// Scale-profile exponent on the eigenvalues.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Correlation of x2 with the spatial process, in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    pub confounding: f64,
    /// exact or nystrom
    #[arg(long, default_value = "exact")]
    pub approx: String,
    #[arg(long, default_value_t = 200)]
    pub anchors: usize,
    /// Output CSV path.
    #[arg(long, default_value = "simulated.csv")]
    pub out: PathBuf,
}

fn parse_beta(s: &str) -> CliResult<Vec<f64>> {
    config::split_list(s)
        .iter()
        .map(|b| {
            b.parse::<f64>()
                .map_err(|_| CliError::Input(format!("beta: '{b}' is not a number")))
        })
        .collect()
}

pub fn run(args: SimulateArgs) -> CliResult<()> {
    let basis: BasisMode = config::parse_approx(&args.approx, args.anchors, args.seed)?;
    let spec = SimSpec {
        n: args.n,
        beta: parse_beta(&args.beta)?,
        sg_ratio: args.sg_ratio,
        alpha: args.alpha,
        sigma: args.sigma,
        covariate_spatial_corr: args.confounding,
        seed: args.seed,
        basis,
        ..SimSpec::default()
    };
    let data = generate(&spec).map_err(|e| CliError::numerical("simulation", e))?;

    let k = data.x.ncols();
    let mut header = vec!["coord_x".to_string(), "coord_y".to_string(), "y".to_string()];
    header.extend((2..=k).map(|j| format!("x{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..data.y.len())
        .map(|i| {
            let [cx, cy] = data.sites.coords()[i];
            let mut row = vec![cell(Some(cx)), cell(Some(cy)), cell(Some(data.y[i]))];
            row.extend((1..k).map(|j| cell(Some(data.x[(i, j)]))));
            row
        })
        .collect();
    write_csv(&args.out, &header, &rows)?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}
