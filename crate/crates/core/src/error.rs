use thiserror::Error;

/// Errors surfaced by the library's public operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Task-sequential protocol violations (out-of-order training,
    /// re-reading consumed training data).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Hard-negative mining with a single registered key-learner; the
    /// caller must drop the triplet term.
    #[error("no negative available: only one key-learner registered")]
    NoNegative,

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
