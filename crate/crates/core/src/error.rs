use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or size mismatch in a tensor operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller violated an operation contract (non-scalar loss, empty batch, ...).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// File could not be read, written or parsed.
    #[error("i/o error on {path}: {detail}")]
    Io { path: PathBuf, detail: String },

    /// Persistence file failed validation (bad magic, truncation, ...).
    #[error("format error on {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Training produced a non-finite loss.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Io { path: path.into(), detail: detail.to_string() }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Format { path: path.into(), detail: detail.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
