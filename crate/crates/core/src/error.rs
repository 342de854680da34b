use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum So3Error {
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("episode already terminated; call reset first")]
    Terminated,
    #[error("environment used before reset")]
    NotReset,
    #[error(transparent)]
    So3(#[from] So3Error),
}

/// Crate-wide error used by training, evaluation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("estimator diverged: {0}")]
    EstimatorDivergence(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    So3(#[from] So3Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
