//! Causal self-attention read as a latent-noise prior over embedding
//! sequences.
//!
//! The residual map `e_t = x_t - μ_t(x)` with `μ_t` an attention-weighted
//! mean of earlier values turns isotropic Gaussian noise into a density over
//! embeddings. This crate computes that density exactly, exposes the
//! per-position Jacobian blocks and margins to degeneracy, and provides
//! executable checks for the process-level and depth-level properties of the
//! model, plus the autodiff machinery used to train with the barrier term.

pub mod attention_prior;
pub mod depth_hierarchy;
pub mod error;
pub mod nn;
pub mod numdiff;
pub mod process_consistency;
pub mod quadrature;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
