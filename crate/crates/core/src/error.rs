use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("driver slope {slope} exceeds bound {limit}")]
    SlopeBound { slope: f64, limit: f64 },

    #[error("measure rejected: {0}")]
    MeasureRejected(String),

    #[error("sequence is not Cauchy: {0}")]
    NotCauchy(String),

    #[error("declared Lipschitz constant {declared} violated (observed ratio {observed})")]
    LipschitzViolation { declared: f64, observed: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
