//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Shape or dimension mismatch between tensors or graph structures.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An out-of-range or inconsistent user-supplied parameter.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Data failed validation (labels out of range, non-finite values, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Inconsistent model or training configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("corrupt {kind} file {path}: {msg}")]
    Corrupt {
        kind: &'static str,
        path: String,
        msg: String,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
