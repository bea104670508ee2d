//! Option parsing shared by flags and the TOML config file.
//!
//! Every setting is parsed from text, so a value reads the same whether it
//! came from `--bootstrap 200` or `bootstrap = 200` in the file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sfuqr::eigen::BasisMode;
use sfuqr::geometry::{Kernel, Range};
use sfuqr::model::{tau_grid, Mode};
use sfuqr::rif::{Bandwidth, QuantileSpec};

use crate::error::{CliError, CliResult};

/// A TOML scalar; numbers are turned back into text for the shared parsers.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Int(i64),
    Float(f64),
    Text(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Int(v) => write!(f, "{v}"),
            Scalar::Float(v) => write!(f, "{v}"),
            Scalar::Text(s) => f.write_str(s),
        }
    }
}

/// Contents of a `--config` file. Keys mirror the long flag names with
/// dashes replaced by underscores.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub response: Option<String>,
    pub covariates: Option<Vec<String>>,
    pub coords: Option<Vec<String>>,
    pub log: Option<Vec<String>>,
    pub mode: Option<String>,
    pub taus: Option<Scalar>,
    pub bootstrap: Option<Scalar>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub approx: Option<String>,
    pub anchors: Option<usize>,
    pub range: Option<Scalar>,
    pub kernel: Option<String>,
    pub bandwidth: Option<Scalar>,
    pub cap: Option<usize>,
    pub ci_level: Option<f64>,
    pub freeze_bandwidth: Option<bool>,
    pub skip_moran: Option<bool>,
    pub export_basis: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))
    }
}

pub fn parse_mode(s: &str) -> CliResult<Mode> {
    match s.to_ascii_lowercase().as_str() {
        "sfuqr" => Ok(Mode::Sfuqr),
        "uqr" => Ok(Mode::Uqr),
        "lm" => Ok(Mode::Lm),
        "reesf" => Ok(Mode::Reesf),
        _ => Err(CliError::Input(format!("unknown mode '{s}' (expected sfuqr, uqr, lm or reesf)"))),
    }
}

pub fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Sfuqr => "sfuqr",
        Mode::Uqr => "uqr",
        Mode::Lm => "lm",
        Mode::Reesf => "reesf",
    }
}

fn number(what: &str, s: &str) -> CliResult<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| CliError::Input(format!("{what}: '{s}' is not a number")))
}

/// `lo:hi:step` or a comma-separated list of levels.
pub fn parse_taus(s: &str) -> CliResult<Vec<QuantileSpec>> {
    let input = |e: sfuqr::Error| CliError::Input(e.to_string());
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [lo, hi, step] => tau_grid(number("taus", lo)?, number("taus", hi)?, number("taus", step)?).map_err(input),
        [_] => s
            .split(',')
            .map(|t| QuantileSpec::new(number("taus", t)?).map_err(input))
            .collect(),
        _ => Err(CliError::Input(format!("taus: expected lo:hi:step or a list, got '{s}'"))),
    }
}

/// Replicate count, or `None` for `none`/`0`.
pub fn parse_bootstrap(s: &str) -> CliResult<Option<usize>> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    let m: usize = s
        .trim()
        .parse()
        .map_err(|_| CliError::Input(format!("bootstrap: expected a replicate count or 'none', got '{s}'")))?;
    Ok((m > 0).then_some(m))
}

pub fn parse_range(s: &str) -> CliResult<Range> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Range::Auto);
    }
    let r = number("range", s)?;
    if !(r > 0.0 && r.is_finite()) {
        return Err(CliError::Input(format!("range must be > 0, got {s}")));
    }
    Ok(Range::Fixed(r))
}

pub fn parse_bandwidth(s: &str) -> CliResult<Bandwidth> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Bandwidth::Auto);
    }
    let h = number("bandwidth", s)?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(CliError::Input(format!("bandwidth must be > 0, got {s}")));
    }
    Ok(Bandwidth::Fixed(h))
}

pub fn parse_kernel(s: &str) -> CliResult<Kernel> {
    match s.to_ascii_lowercase().as_str() {
        "exponential" | "exp" => Ok(Kernel::Exponential),
        "gaussian" => Ok(Kernel::Gaussian),
        _ => Err(CliError::Input(format!("unknown kernel '{s}' (expected exponential or gaussian)"))),
    }
}

pub fn parse_approx(s: &str, anchors: usize, seed: u64) -> CliResult<BasisMode> {
    match s.to_ascii_lowercase().as_str() {
        "exact" => Ok(BasisMode::Exact),
        "nystrom" | "nyström" => {
            if anchors < 2 {
                return Err(CliError::Input(format!("need at least 2 anchors, got {anchors}")));
            }
            Ok(BasisMode::Nystrom { anchors, seed })
        }
        _ => Err(CliError::Input(format!("unknown approximation '{s}' (expected exact or nystrom)"))),
    }
}

pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

pub fn coord_pair(names: &[String]) -> CliResult<(String, String)> {
    match names {
        [a, b] => Ok((a.clone(), b.clone())),
        _ => Err(CliError::Input(format!(
            "coords needs exactly two column names, got {}",
            names.len()
        ))),
    }
}

/// `SFUQR_THREADS`, then the machine's parallelism.
pub fn default_workers() -> CliResult<usize> {
    match std::env::var("SFUQR_THREADS") {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Input(format!("SFUQR_THREADS must be a positive integer, got '{v}'"))),
        },
        _ => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}
