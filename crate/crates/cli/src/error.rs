use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] attnprior_core::Error),

    #[error(transparent)]
    Lm(#[from] attnprior_lm::LmError),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("config key {key:?}: {msg}")]
    Config { key: String, msg: String },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn config(key: &str, msg: impl Into<String>) -> Self {
        CliError::Config { key: key.to_string(), msg: msg.into() }
    }
}
