use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{key}: {message}")]
    Key { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}; rerun without --exact-z to score with the stored normalizers")]
    OracleBudget(trf_core::Error),

    #[error(
        "gradient check failed: worst block {block} in {check} with relative error {rel_error:.3e}"
    )]
    GradCheckFailed {
        check: String,
        block: String,
        rel_error: f64,
    },

    #[error(transparent)]
    Core(#[from] trf_core::Error),
}

impl CliError {
    pub fn key(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Key {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
