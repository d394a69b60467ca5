//! Character-level language modelling with the attention-prior margin
//! penalty: corpus ingestion, a small causal GPT, MAP training, embedding
//! noise robustness and the `λ_m` sweep.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod manifest;
pub mod model;
pub mod robustness;
pub mod sweep;
pub mod train;
pub mod vocab;

pub use error::{LmError, Result};
