//! Drawing sequences from the prior by inverting the residual map one
//! position at a time.

use super::{context_summary, AttentionPriorParams, EmbeddingSequence};
use crate::error::Result;
use crate::rng::{normal_vec, Rng};
use crate::tensor::linalg::Lu;
use crate::tensor::Tensor;

const MAX_NEWTON: usize = 100;
const MAX_HALVINGS: usize = 40;

/// Solves `z - μ_t(x_<t, z) = e` for the position after `prefix` (`t x d`,
/// row-major) by damped Newton steps on the analytic diagonal block.
///
/// Returns `None` when the iteration stalls or the block at the solution is
/// not valid.
pub fn solve_position(params: &AttentionPriorParams, prefix: &[f64], e: &[f64]) -> Result<Option<Vec<f64>>> {
    let d = params.dim();
    let t = prefix.len() / d;
    let eval = |z: &[f64]| -> Result<(Vec<f64>, super::PositionStats)> {
        let mut data = prefix.to_vec();
        data.extend_from_slice(z);
        let x = EmbeddingSequence::new(Tensor::matrix(t + 1, d, data)?)?;
        let (mu, stats) = context_summary(params, &x, t)?;
        let f = z.iter().zip(&mu).zip(e).map(|((z, m), e)| z - m - e).collect();
        Ok((f, stats))
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    let (_, s0) = eval(e)?;
    let mut z: Vec<f64> = e.iter().zip(&s0.v_bar).map(|(e, m)| e + m).collect();
    let (mut f, mut stats) = eval(&z)?;
    for _ in 0..MAX_NEWTON {
        if norm(&f) <= 1e-13 * (1.0 + norm(&z)) {
            return Ok(stats.is_valid().then_some(z));
        }
        let lu = Lu::new(&stats.diag_block, d);
        if lu.is_singular() {
            return Ok(None);
        }
        let mut step = f.clone();
        lu.solve_in_place(&mut step);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = z.iter().zip(&step).map(|(z, s)| z - scale * s).collect();
            let (fc, sc) = eval(&cand)?;
            if norm(&fc) < norm(&f) {
                z = cand;
                f = fc;
                stats = sc;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            let ok = norm(&f) <= 1e-10 * (1.0 + norm(&z)) && stats.is_valid();
            return Ok(ok.then_some(z));
        }
    }
    Ok(None)
}

/// Draws `n` positions ancestrally: `ε_t ~ N(0, σ² I)`, then `x_t` solves
/// `x_t - μ_t = ε_t`. `None` marks a degenerate draw.
pub fn ancestral_sample(params: &AttentionPriorParams, n: usize, rng: &mut Rng) -> Result<Option<EmbeddingSequence>> {
    let d = params.dim();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let e = normal_vec(rng, d, params.sigma());
        match solve_position(params, &data, &e)? {
            Some(z) => data.extend(z),
            None => return Ok(None),
        }
    }
    Ok(Some(EmbeddingSequence::new(Tensor::matrix(n, d, data)?)?))
}
