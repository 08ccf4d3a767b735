//! Error taxonomy shared by every module.
//!
//! The CLI maps these onto process exit codes: contract-style failures
//! (`Dim`, `Contract`, `Config`, `Format`, `State`, `Io`) exit 1, numeric
//! failures (`Numeric`, `Training`) exit 2.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum KrcError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("training failed at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl KrcError {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        KrcError::Dim { op, detail: detail.into() }
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        KrcError::Numeric { op, detail: detail.into() }
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            KrcError::Numeric { .. } | KrcError::Training { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, KrcError>;
