//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// The CLI maps these onto stable exit codes: configuration, parse, format
/// and I/O problems exit with 2; numeric failures during training exit with 3.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called outside its contract (shape mismatch,
    /// out-of-range index, asymmetric input to a symmetric solver, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Structurally valid input that the operation cannot meaningfully
    /// process (empty dataset, rank-deficient columns, all-zero spectrum).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A numeric computation failed (non-finite values, no convergence).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Text input (CSV, config) that could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// Binary input (IDX, checkpoint) that violates its format.
    #[error("format error: {0}")]
    Format(String),

    /// Invalid run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
