//! Signal-to-noise ratio and normalized attention variance of the embedding
//! prior on held-out text.

use attnprior_core::attention_prior::strict_weights;
use attnprior_core::Graph;
use serde::{Deserialize, Serialize};

use crate::data::eval_starts;
use crate::error::{LmError, Result};
use crate::model::{EmbeddingNoise, EmbeddingPrior, SmallGpt};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `RMS(x_t) / RMS(x_t - μ_t)`.
    pub snr: f64,
    /// Mean `tr(Σ_t)` divided by `RMS(x)²`.
    pub var_norm: f64,
    pub positions: usize,
}

/// Both statistics over positions with a nonempty context, with RMS taken
/// over every coordinate of every such position in the evaluated windows.
pub fn diagnostics(
    model: &SmallGpt,
    prior: &EmbeddingPrior,
    tokens: &[usize],
    max_windows: usize,
    batch: usize,
) -> Result<Diagnostics> {
    let t = model.cfg.context;
    let starts = eval_starts(tokens, t, max_windows);
    let (mut sx, mut se, mut tr, mut positions, mut elems) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for chunk in starts.chunks(batch.max(1)) {
        let ids: Vec<usize> = chunk.iter().flat_map(|&s| tokens[s..s + t].iter().copied()).collect();
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let x = model.embed(&mut g, &vars, &ids, chunk.len(), EmbeddingNoise::default())?;
        let w = g.constant(prior.w.clone());
        let p = strict_weights(&mut g, w, x)?;
        let mu = g.matmul(p, x)?;
        let rest = g.slice(x, 1, 1, t - 1)?;
        let cov = g.weighted_cov(p, x)?;
        let d = model.cfg.d_model;
        sx += g.value(rest).norm_sq();
        se += g.value(rest).sub(g.value(mu))?.norm_sq();
        tr += g.value(cov).data().chunks(d * d).map(|m| (0..d).map(|i| m[i * d + i]).sum::<f64>()).sum::<f64>();
        positions += chunk.len() * (t - 1);
        elems += chunk.len() * (t - 1) * d;
    }
    if positions == 0 {
        return Err(LmError::Ingestion(format!("no diagnostic windows of {t} tokens")));
    }
    let mean_sq = sx / elems as f64;
    Ok(Diagnostics { snr: (sx / se).sqrt(), var_norm: tr / positions as f64 / mean_sq, positions })
}
