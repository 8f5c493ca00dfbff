use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed image bytes; `offset` is the byte position the decoder
    /// was looking at when it gave up.
    #[error("image decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    /// Incompatible dimensions between two inputs.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller-supplied value out of its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Inconsistent model or run configuration.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A pruning strategy that cannot meet its budget.
    #[error("infeasible strategy: {0}")]
    Infeasible(String),

    /// Numerical failure (singular kernel, zero-norm vector, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A trace-bundle manifest field that is missing or inconsistent
    /// with the blobs on disk.
    #[error("manifest field `{field}`: {reason}")]
    Manifest { field: String, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
