use sfuqr::model::StageError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{stage} failed: {message}")]
    Numerical { stage: String, message: String },
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical { .. } => 3,
            CliError::Output { .. } => 1,
        }
    }

    pub fn numerical(stage: &str, err: sfuqr::Error) -> Self {
        if err.is_input() {
            CliError::Input(err.to_string())
        } else {
            CliError::Numerical {
                stage: stage.to_string(),
                message: err.to_string(),
            }
        }
    }
}

impl From<StageError> for CliError {
    fn from(e: StageError) -> Self {
        if e.error.is_input() {
            CliError::Input(format!("{}: {}", e.stage, e.error))
        } else {
            CliError::Numerical {
                stage: e.stage.to_string(),
                message: e.error.to_string(),
            }
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
