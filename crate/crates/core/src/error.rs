use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("record {record}: dimension mismatch: {detail}")]
    DimensionMismatch { record: usize, detail: String },

    #[error("record {record}: truncated payload (expected {expected} bytes, found {found})")]
    Truncated {
        record: usize,
        expected: usize,
        found: usize,
    },

    /// The two-stage protocol was violated, e.g. features requested from an
    /// encoder that has not been frozen.
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
