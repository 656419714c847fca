use thiserror::Error;

/// Errors raised by the pure kinematic and analytic routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// The vehicle stops (or moves away) before reaching the target position.
    #[error("target position is unreachable under the current dynamics")]
    Unreachable,
    /// Delivery ratio of zero puts all probability mass past the failure threshold.
    #[error("degenerate channel: packet delivery ratio must be positive")]
    DegenerateChannel,
}

impl ModelError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ModelError::InvalidInput(msg.into())
    }
}

/// Errors from scenario loading and the command-line front end.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}
