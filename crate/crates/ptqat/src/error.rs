//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A function precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration (unknown arch, bad flag combination, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed serialized container; `offset` is the byte position of the
    /// first inconsistency.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Named entity (layer, ...) not found.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Index out of range (labels, ...).
    #[error("index error: {0}")]
    Index(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    /// Process exit code for the CLI: 0 success, 2 config, 3 input format,
    /// 4 internal invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format { .. } | Error::Io(_) | Error::Json(_) => 3,
            _ => 4,
        }
    }
}
