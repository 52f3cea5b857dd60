//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition (bad shape, bad token id, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The operation is not defined for the given model or configuration.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Inconsistent experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A persisted artifact could not be parsed (bad magic, version, truncation).
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
