//! Error taxonomy shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Failure modes surfaced by the library.
///
/// The CLI maps `Config` to exit code 2 and `Numeric` to exit code 3; all
/// other variants indicate caller bugs (dimension or argument misuse) or
/// environment problems (I/O).
#[derive(Debug, Error)]
pub enum CurlError {
    /// Tensor shapes or horizon lengths disagree between arguments.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument is outside its contract (bad simplex, empty sequence, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A quantity left its mathematical domain (log of zero mass, ...).
    #[error("domain violation: {0}")]
    Domain(String),

    /// Floating-point breakdown: non-finite values or failed convergence.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An object was used out of phase (missing noise record, stale state).
    #[error("invalid state: {0}")]
    State(String),

    /// Configuration file rejected (unknown keys, bad version, bad values).
    #[error("config error: {0}")]
    Config(String),

    /// I/O failure with the offending path attached.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CurlError {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CurlError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CurlError>;
