//! CSV ingestion and assembly of the response, design matrix and sites.

use std::path::Path;

use nalgebra::DMatrix;
use sfuqr::geometry::SiteSet;

use crate::error::{CliError, CliResult};

const MISSING: [&str; 6] = ["", "NA", "NaN", "nan", "null", "."];

/// Raw CSV cells; parsed lazily so unused columns may hold anything.
pub struct Table {
    pub headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> CliResult<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| CliError::Input(format!("cannot read header of {}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| CliError::Input(format!("{}: row {}: {e}", path.display(), i + 1)))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        if rows.is_empty() {
            return Err(CliError::Input(format!("{} has no data rows", path.display())));
        }
        Ok(Self { headers, rows })
    }

    pub fn has(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    fn index(&self, name: &str) -> CliResult<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Input(format!("column '{name}' not found in input (have: {})", self.headers.join(", "))))
    }

    /// Parsed column with `None` for missing cells.
    pub fn column(&self, name: &str) -> CliResult<Vec<Option<f64>>> {
        let j = self.index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let cell = row.get(j).map(String::as_str).unwrap_or("");
                if MISSING.contains(&cell) {
                    return Ok(None);
                }
                cell.parse::<f64>()
                    .map(Some)
                    .map_err(|_| CliError::Input(format!("column '{name}', row {}: '{cell}' is not a number", i + 1)))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Schema {
    pub response: String,
    /// `None` selects every column except the response and coordinates.
    pub covariates: Option<Vec<String>>,
    pub coords: (String, String),
    pub log: Vec<String>,
}

pub struct Dataset {
    pub y: Vec<f64>,
    /// Intercept first.
    pub x: DMatrix<f64>,
    /// Names of the columns of `x`, starting with `(Intercept)`.
    pub variables: Vec<String>,
    pub sites: Option<SiteSet>,
    pub rows_used: usize,
    pub rows_dropped: usize,
}

pub fn assemble(table: &Table, schema: &Schema, need_sites: bool) -> CliResult<Dataset> {
    let covariates: Vec<String> = match &schema.covariates {
        Some(c) => c.clone(),
        None => table
            .headers
            .iter()
            .filter(|h| **h != schema.response && **h != schema.coords.0 && **h != schema.coords.1)
            .cloned()
            .collect(),
    };
    for name in &schema.log {
        if *name != schema.response && !covariates.contains(name) {
            return Err(CliError::Input(format!(
                "--log column '{name}' is neither the response nor a covariate"
            )));
        }
    }
    let use_sites = need_sites || (table.has(&schema.coords.0) && table.has(&schema.coords.1));

    let mut columns = vec![table.column(&schema.response)?];
    for c in &covariates {
        columns.push(table.column(c)?);
    }
    if use_sites {
        columns.push(table.column(&schema.coords.0)?);
        columns.push(table.column(&schema.coords.1)?);
    }

    let n_all = columns[0].len();
    let keep: Vec<usize> = (0..n_all).filter(|&i| columns.iter().all(|c| c[i].is_some())).collect();
    let rows_dropped = n_all - keep.len();
    if rows_dropped > 0 {
        log::warn!("dropped {rows_dropped} of {n_all} rows with missing values");
    }
    let pick = |c: &Vec<Option<f64>>| -> Vec<f64> { keep.iter().map(|&i| c[i].unwrap()).collect() };

    let mut data: Vec<Vec<f64>> = columns.iter().map(pick).collect();
    let names: Vec<&String> = std::iter::once(&schema.response).chain(&covariates).collect();
    for (col, name) in data.iter_mut().zip(&names) {
        if schema.log.contains(name) {
            if let Some(bad) = col.iter().find(|v| **v <= 0.0) {
                return Err(CliError::Input(format!(
                    "cannot log-transform '{name}': contains non-positive value {bad}"
                )));
            }
            col.iter_mut().for_each(|v| *v = v.ln());
        }
    }

    let n = keep.len();
    let k = covariates.len() + 1;
    if n <= k {
        return Err(CliError::Input(format!(
            "{n} complete rows are not enough for {k} coefficients"
        )));
    }
    let x = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { data[j][i] });
    let sites = if use_sites {
        let (cx, cy) = (&data[k], &data[k + 1]);
        let coords = cx.iter().zip(cy).map(|(a, b)| [*a, *b]).collect();
        Some(SiteSet::new(coords).map_err(|e| CliError::Input(e.to_string()))?)
    } else {
        None
    };
    let variables = std::iter::once("(Intercept)".to_string()).chain(covariates).collect();
    Ok(Dataset {
        y: data.swap_remove(0),
        x,
        variables,
        sites,
        rows_used: n,
        rows_dropped,
    })
}
