use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("fit did not converge after {iterations} iterations: {reason}")]
    ConvergenceFailure { iterations: usize, reason: String },

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("missing column `{0}` in input data")]
    MissingColumn(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
