use thiserror::Error;

#[derive(Debug, Error)]
pub enum NarError {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN/Inf reached a place that requires finite values.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// A test oracle detected it cannot trust its own measurement.
    #[error("oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NarError>;
