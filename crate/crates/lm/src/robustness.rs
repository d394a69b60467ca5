//! BPC under additive Gaussian noise on the embedding-layer output.

use attnprior_core::rng::derived_rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::eval_starts;
use crate::error::Result;
use crate::model::SmallGpt;
use crate::train::{bpc, eval_ce, gaussian_noise};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub sigma: f64,
    pub draws: Vec<f64>,
    pub mean_bpc: f64,
    /// `mean_bpc / clean_bpc`.
    pub degradation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub clean_bpc: f64,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessTable {
    pub fn at(&self, sigma: f64) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| (r.sigma - sigma).abs() < 1e-12)
    }

    /// True when the mean BPC never decreases along the grid.
    pub fn is_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].mean_bpc >= w[0].mean_bpc)
    }
}

/// Evaluates `model` on `tokens` at every `sigma` with `n_draws` noise draws.
///
/// Draw `j` uses the same standard-normal field at every noise level, scaled
/// by `sigma`, so the curve is not confounded by draw-to-draw variation.
/// `sigma = 0` is the clean evaluation.
pub fn noise_robustness_eval(
    model: &SmallGpt,
    tokens: &[usize],
    sigmas: &[f64],
    n_draws: usize,
    seed: u64,
    max_windows: usize,
    batch: usize,
) -> Result<RobustnessTable> {
    let starts = eval_starts(tokens, model.cfg.context, max_windows);
    let clean = eval_ce(model, tokens, &starts, batch, |_, _, _| None)?;
    let jobs: Vec<(usize, usize)> = (0..sigmas.len())
        .filter(|&i| sigmas[i] != 0.0)
        .flat_map(|i| (0..n_draws).map(move |j| (i, j)))
        .collect();
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let mut rng = derived_rng(seed, j as u64);
            eval_ce(model, tokens, &starts, batch, |b, t, d| Some(gaussian_noise(&mut rng, [b, t, d], sigmas[i])))
        })
        .collect();
    let mut per_sigma = vec![Vec::new(); sigmas.len()];
    for (&(i, _), r) in jobs.iter().zip(results) {
        per_sigma[i].push(bpc(r?));
    }
    let clean_bpc = bpc(clean);
    let rows = sigmas
        .iter()
        .zip(per_sigma)
        .map(|(&sigma, draws)| {
            let draws = if sigma == 0.0 { vec![clean_bpc; n_draws.max(1)] } else { draws };
            let mean_bpc = draws.iter().sum::<f64>() / draws.len() as f64;
            RobustnessRow { sigma, mean_bpc, degradation: mean_bpc / clean_bpc, draws }
        })
        .collect();
    Ok(RobustnessTable { clean_bpc, rows })
}
