use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LmError>;

#[derive(Debug, Error)]
pub enum LmError {
    #[error(transparent)]
    Core(#[from] attnprior_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("corpus ingestion failed: {0}")]
    Ingestion(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// The training loss stopped being finite.
    #[error("non-finite loss at epoch {epoch}, step {step} (ce {ce}, margin {margin}, {saturated} saturated determinants in the last penalty)")]
    Diverged { epoch: usize, step: usize, ce: f64, margin: f64, saturated: usize },
}

impl LmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LmError::Io { path: path.into(), source }
    }
}
