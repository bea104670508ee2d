use thiserror::Error;

/// Errors raised anywhere in the fitting pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("connectivity has no positive Moran eigenvalue; spatial filtering is impossible (use plain UQR)")]
    NoPositivePattern,

    #[error("Moran coefficient undefined for a constant vector")]
    UndefinedMoran,

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("estimated density {value:e} at the quantile is below the minimum {min:e}")]
    NearZeroDensity { value: f64, min: f64 },

    #[error("design matrix is collinear; offending columns: {columns:?}")]
    Collinearity { columns: Vec<usize> },

    #[error("numerically singular system (condition estimate {condition:e})")]
    NumericalSingularity { condition: f64 },

    #[error("bootstrap unreliable: {failed} of {total} replicates failed")]
    BootstrapUnreliable { failed: usize, total: usize },
}

impl Error {
    /// True for errors caused by malformed or unsuitable input rather than
    /// by numerical breakdown during estimation.
    pub fn is_input(&self) -> bool {
        matches!(
            self,
            Error::Input(_) | Error::DegenerateGeometry(_) | Error::Collinearity { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
