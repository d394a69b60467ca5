//! The prior's terms recorded on an autodiff tape, for training.

use crate::error::{Error, Result};
use crate::tensor::graph::{DetFloor, Mask};
use crate::tensor::linalg::DET_FLOOR;
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    /// Mean over batch and positions with a nonempty context.
    Mean,
}

pub struct PenaltyOutput {
    pub value: Var,
    /// Positions whose `|det|` fell below the floor and were clamped.
    pub saturated: usize,
    pub positions: usize,
}

fn as_batch(g: &mut Graph, x: Var) -> Result<Var> {
    match g.shape(x).len() {
        2 => {
            let s = g.shape(x).to_vec();
            g.reshape(x, &[1, s[0], s[1]])
        }
        3 => Ok(x),
        _ => Err(Error::dim(format!("expected [T, d] or [B, T, d], got {:?}", g.shape(x)))),
    }
}

/// Strict-causal attention weights `softmax_s<t(x_tᵀ W x_s)` for positions
/// `1..T`, shape `[B, T-1, T]`.
pub fn strict_weights(g: &mut Graph, w: Var, x: Var) -> Result<Var> {
    let t = g.shape(x)[1];
    let xw = g.matmul(x, w)?;
    let logits = g.matmul_t(xw, x, false, true)?;
    let rows = g.slice(logits, 1, 1, t - 1)?;
    g.masked_softmax(rows, Mask::Strict, 1)
}

/// `-Σ_t log|det(I - Σ_t Wᵀ)|` over positions with a nonempty context, with
/// `Σ_t` the attention-weighted covariance of `x` under logits `x_tᵀ W x_s`.
///
/// `x` is `[T, d]` or `[B, T, d]`; `w` is `d x d`. Determinants below the
/// floor are clamped and counted.
pub fn margin_penalty(g: &mut Graph, w: Var, x: Var, reduction: Reduction) -> Result<PenaltyOutput> {
    let x = as_batch(g, x)?;
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    if g.shape(w) != [d, d] {
        return Err(Error::dim(format!("W must be {d}x{d}, got {:?}", g.shape(w))));
    }
    if t < 2 {
        let zero = g.constant(crate::Tensor::scalar(0.0));
        return Ok(PenaltyOutput { value: zero, saturated: 0, positions: 0 });
    }
    let p = strict_weights(g, w, x)?;
    let cov = g.weighted_cov(p, x)?;
    let cov_a = g.matmul_t(cov, w, false, true)?;
    let block = g.eye_minus(cov_a)?;
    let (logdet, saturated) = g.logabsdet(block, DetFloor::Clamp(DET_FLOOR))?;
    let reduced = match reduction {
        Reduction::Sum => g.sum(logdet),
        Reduction::Mean => g.mean(logdet),
    };
    Ok(PenaltyOutput {
        value: g.scale(reduced, -1.0),
        saturated,
        positions: b * (t - 1),
    })
}

/// `Σ_t ‖x_t - μ_t‖² / (2σ²)` over positions with a nonempty context, with
/// the same attention as [`margin_penalty`]. The first position's residual is
/// `x_1` itself and is included.
pub fn residual_energy(g: &mut Graph, w: Var, x: Var, sigma: f64, reduction: Reduction) -> Result<Var> {
    let x = as_batch(g, x)?;
    let s = g.shape(x).to_vec();
    let (b, t) = (s[0], s[1]);
    let sq_first = {
        let first = g.slice(x, 1, 0, 1)?;
        let sq = g.mul(first, first)?;
        g.sum(sq)
    };
    let total = if t >= 2 {
        let p = strict_weights(g, w, x)?;
        let mu = g.matmul(p, x)?;
        let rest = g.slice(x, 1, 1, t - 1)?;
        let e = g.sub(rest, mu)?;
        let sq = g.mul(e, e)?;
        let sq = g.sum(sq);
        g.add(sq_first, sq)?
    } else {
        sq_first
    };
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / (b * t) as f64,
    };
    Ok(g.scale(total, scale / (2.0 * sigma * sigma)))
}
