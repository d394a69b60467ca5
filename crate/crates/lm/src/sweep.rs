//! Full training runs with evaluation, and the `λ_m` regularization path.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{GptConfig, TrainConfig};
use crate::data::Corpus;
use crate::diagnostics::{diagnostics, Diagnostics};
use crate::error::{LmError, Result};
use crate::robustness::{noise_robustness_eval, RobustnessTable};
use crate::train::{train, MarginPath, TrainLog, Trained};

/// Noise level at which the sweep reports degradation.
pub const SWEEP_SIGMA: f64 = 0.3;

/// Seed offset for noise draws, keeping them apart from training streams.
pub const NOISE_SEED_OFFSET: u64 = 0x6e6f697365;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub lambda_m: f64,
    pub seed: u64,
    pub log: TrainLog,
    pub clean_bpc: f64,
    pub robustness: RobustnessTable,
    /// `None` for `λ_m = 0`, where the prior is never trained.
    pub diagnostics: Option<Diagnostics>,
}

impl TrainRunRecord {
    pub fn degradation(&self, sigma: f64) -> Option<f64> {
        self.robustness.at(sigma).map(|r| r.degradation)
    }

    pub fn noisy_bpc(&self, sigma: f64) -> Option<f64> {
        self.robustness.at(sigma).map(|r| r.mean_bpc)
    }

    pub fn total_saturated(&self) -> usize {
        self.log.epochs.iter().map(|e| e.saturated).sum()
    }
}

/// Evaluates a trained model on the validation split: noisy BPC on the
/// `sigmas` grid and, for `λ_m > 0`, the prior diagnostics.
pub fn evaluate_run(trained: &Trained, corpus: &Corpus, cfg: &TrainConfig, sigmas: &[f64], n_draws: usize) -> Result<TrainRunRecord> {
    if n_draws == 0 {
        return Err(LmError::Config("at least one noise draw is required".into()));
    }
    let robustness = noise_robustness_eval(
        &trained.model,
        &corpus.val,
        sigmas,
        n_draws,
        cfg.seed.wrapping_add(NOISE_SEED_OFFSET),
        cfg.eval_windows,
        cfg.batch,
    )?;
    let diagnostics = if cfg.lambda_m > 0.0 {
        Some(diagnostics(&trained.model, &trained.prior, &corpus.val, cfg.eval_windows, cfg.batch)?)
    } else {
        None
    };
    Ok(TrainRunRecord {
        lambda_m: cfg.lambda_m,
        seed: cfg.seed,
        log: trained.log.clone(),
        clean_bpc: robustness.clean_bpc,
        robustness,
        diagnostics,
    })
}

/// Trains and evaluates one configuration. `λ_m = 0` takes the CE-only path,
/// which produces the same weights without evaluating the penalty.
pub fn run(corpus: &Corpus, gpt: &GptConfig, cfg: &TrainConfig, sigmas: &[f64], n_draws: usize) -> Result<(Trained, TrainRunRecord)> {
    let path = if cfg.lambda_m == 0.0 { MarginPath::Disabled } else { MarginPath::Enabled };
    let trained = train(corpus, gpt, cfg, path)?;
    let record = evaluate_run(&trained, corpus, cfg, sigmas, n_draws)?;
    Ok((trained, record))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub records: Vec<TrainRunRecord>,
}

impl LambdaSweep {
    pub fn degradations(&self, sigma: f64) -> Vec<f64> {
        self.records.iter().map(|r| r.degradation(sigma).unwrap_or(f64::NAN)).collect()
    }

    /// Index of the smallest degradation at `sigma`, if it is neither the
    /// first nor the last grid point.
    pub fn interior_minimum(&self, sigma: f64) -> Option<usize> {
        interior_argmin(&self.degradations(sigma))
    }

    /// `(max - min) / min` of clean BPC across the sweep.
    pub fn clean_spread(&self) -> f64 {
        let c: Vec<f64> = self.records.iter().map(|r| r.clean_bpc).collect();
        let (lo, hi) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        (hi - lo) / lo
    }

    pub fn record(&self, lambda: f64) -> Option<&TrainRunRecord> {
        self.records.iter().find(|r| r.lambda_m == lambda)
    }
}

/// Position of the first minimum of `v` when it lies strictly inside.
pub fn interior_argmin(v: &[f64]) -> Option<usize> {
    let (i, _) = v
        .iter()
        .enumerate()
        .fold((usize::MAX, f64::INFINITY), |(bi, bv), (i, &x)| if x < bv { (i, x) } else { (bi, bv) });
    (i != usize::MAX && i > 0 && i + 1 < v.len()).then_some(i)
}

/// One run per `λ_m`, all sharing architecture and seed. Runs execute
/// concurrently and are returned in grid order.
pub fn lambda_sweep(
    corpus: &Corpus,
    gpt: &GptConfig,
    base: &TrainConfig,
    lambdas: &[f64],
    sigmas: &[f64],
    n_draws: usize,
) -> Result<LambdaSweep> {
    let records = lambdas
        .par_iter()
        .map(|&lambda_m| {
            let cfg = TrainConfig { lambda_m, ..base.clone() };
            run(corpus, gpt, &cfg, sigmas, n_draws).map(|(_, r)| r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LambdaSweep { records })
}
