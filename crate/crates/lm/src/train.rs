//! MAP training: cross-entropy plus `λ_m` times the embedding-prior margin
//! penalty, optimized with AdamW on a cosine schedule.

use std::f64::consts::LN_2;

use attnprior_core::attention_prior::{margin_penalty, residual_energy, Reduction};
use attnprior_core::rng::{derived_rng, normal_vec};
use attnprior_core::tensor::optim::{adamw_step, clip_grad_norm, cosine_lr, AdamWConfig, AdamWState};
use attnprior_core::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{GptConfig, TrainConfig};
use crate::data::{eval_starts, sample_batch, Corpus};
use crate::error::{LmError, Result};
use crate::model::{EmbeddingNoise, EmbeddingPrior, SmallGpt};

/// RNG streams derived from the run seed.
pub const INIT_STREAM: u64 = 0;
pub const BATCH_STREAM: u64 = 1;
pub const DROPOUT_STREAM: u64 = 2;

/// Whether the margin code path is compiled into the step at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarginPath {
    Enabled,
    /// CE-only step: the prior is neither evaluated nor optimized.
    Disabled,
}

pub fn bpc(ce_nats: f64) -> f64 {
    ce_nats / LN_2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training BPC over the epoch's steps.
    pub train_bpc: f64,
    pub val_bpc: f64,
    /// Mean margin penalty over the epoch's steps (0 on the CE-only path).
    pub margin_loss: f64,
    /// Clamped determinants summed over the epoch.
    pub saturated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Training BPC of the initial weights on the training evaluation windows.
    pub initial_train_bpc: f64,
    pub epochs: Vec<EpochRecord>,
    /// Total loss at every optimizer step.
    pub loss_trace: Vec<f64>,
    pub margin_trace: Vec<f64>,
    pub steps_per_epoch: usize,
}

impl TrainLog {
    pub fn final_val_bpc(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.val_bpc)
    }

    /// Epochs whose training BPC is below the previous epoch's (the initial
    /// weights for epoch 1).
    pub fn decreasing_epochs(&self) -> usize {
        let mut prev = self.initial_train_bpc;
        let mut n = 0;
        for e in &self.epochs {
            if e.train_bpc < prev {
                n += 1;
            }
            prev = e.train_bpc;
        }
        n
    }
}

pub struct Trained {
    pub model: SmallGpt,
    pub prior: EmbeddingPrior,
    pub log: TrainLog,
}

/// Mean CE in nats over the windows starting at `starts`, evaluated in
/// batches of `batch`. `noise(b, t, d)` supplies an additive perturbation
/// for each evaluation batch.
pub fn eval_ce(
    model: &SmallGpt,
    tokens: &[usize],
    starts: &[usize],
    batch: usize,
    mut noise: impl FnMut(usize, usize, usize) -> Option<Tensor>,
) -> Result<f64> {
    let t = model.cfg.context;
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in starts.chunks(batch.max(1)) {
        let mut x = Vec::with_capacity(chunk.len() * t);
        let mut y = Vec::with_capacity(chunk.len() * t);
        for &s in chunk {
            x.extend_from_slice(&tokens[s..s + t]);
            y.extend_from_slice(&tokens[s + 1..s + t + 1]);
        }
        let n = noise(chunk.len(), t, model.cfg.d_model);
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let out = model.forward(&mut g, &vars, &x, chunk.len(), EmbeddingNoise { additive: n.as_ref(), dropout: None })?;
        let ce = g.cross_entropy(out.logits, &y)?;
        total += g.value(ce).item() * y.len() as f64;
        count += y.len();
    }
    if count == 0 {
        return Err(LmError::Ingestion(format!("no evaluation windows of {t} tokens")));
    }
    Ok(total / count as f64)
}

pub fn eval_bpc(model: &SmallGpt, tokens: &[usize], max_windows: usize, batch: usize) -> Result<f64> {
    let starts = eval_starts(tokens, model.cfg.context, max_windows);
    Ok(bpc(eval_ce(model, tokens, &starts, batch, |_, _, _| None)?))
}

pub fn steps_per_epoch(train_tokens: usize, gpt: &GptConfig, cfg: &TrainConfig) -> usize {
    if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        (train_tokens / (cfg.batch * gpt.context)).max(1)
    }
}

/// Trains a freshly initialized model. The initial weights depend only on
/// `(gpt, cfg.seed)`, so runs that differ in `λ_m` start identically.
pub fn train(corpus: &Corpus, gpt: &GptConfig, cfg: &TrainConfig, path: MarginPath) -> Result<Trained> {
    train_with(corpus, gpt, cfg, path, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    corpus: &Corpus,
    gpt: &GptConfig,
    cfg: &TrainConfig,
    path: MarginPath,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Trained> {
    cfg.validate()?;
    let mut gpt = gpt.clone();
    gpt.vocab = corpus.vocab.len();
    let mut model = SmallGpt::init(&gpt, &mut derived_rng(cfg.seed, INIT_STREAM))?;
    let mut prior = EmbeddingPrior::zeros(gpt.d_model);
    let mut batch_rng = derived_rng(cfg.seed, BATCH_STREAM);
    let mut dropout_rng = derived_rng(cfg.seed, DROPOUT_STREAM);

    let steps = steps_per_epoch(corpus.train.len(), &gpt, cfg);
    let total = steps * cfg.epochs;
    let opt = AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let with_prior = path == MarginPath::Enabled && !cfg.freeze_prior;
    let mut params: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    if with_prior {
        params.push(prior.w.clone());
    }
    let mut state = AdamWState::new(&params);
    drop(params);

    let train_starts = eval_starts(&corpus.train, gpt.context, cfg.eval_windows);
    let initial_train_bpc = bpc(eval_ce(&model, &corpus.train, &train_starts, cfg.batch, |_, _, _| None)?);
    let mut log = TrainLog {
        initial_train_bpc,
        epochs: Vec::new(),
        loss_trace: Vec::with_capacity(total),
        margin_trace: Vec::with_capacity(total),
        steps_per_epoch: steps,
    };

    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let (mut ce_sum, mut margin_sum, mut saturated) = (0.0, 0.0, 0);
        for _ in 0..steps {
            let (x, y) = sample_batch(&corpus.train, cfg.batch, gpt.context, &mut batch_rng)?;
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let dropout = (gpt.dropout > 0.0).then_some((gpt.dropout, &mut dropout_rng));
            let out = model.forward(&mut g, &vars, &x, cfg.batch, EmbeddingNoise { additive: None, dropout })?;
            let ce = g.cross_entropy(out.logits, &y)?;
            let mut loss = ce;
            let mut w_var = None;
            let mut margin = 0.0;
            let mut step_saturated = 0;
            if path == MarginPath::Enabled {
                let w = if with_prior { g.param(prior.w.clone()) } else { g.constant(prior.w.clone()) };
                w_var = Some(w);
                let pen = margin_penalty(&mut g, w, out.emb, Reduction::Mean)?;
                step_saturated = pen.saturated;
                margin = g.value(pen.value).item();
                let mut reg = pen.value;
                if cfg.quadratic {
                    let energy = residual_energy(&mut g, w, out.emb, cfg.sigma, Reduction::Mean)?;
                    reg = g.add(reg, energy)?;
                }
                let reg = g.scale(reg, cfg.lambda_m);
                loss = g.add(ce, reg)?;
            }
            let ce_v = g.value(ce).item();
            let loss_v = g.value(loss).item();
            if !loss_v.is_finite() {
                return Err(LmError::Diverged { epoch, step, ce: ce_v, margin, saturated: step_saturated });
            }
            let grads = g.backward(loss)?;
            let mut gs: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
            if with_prior {
                gs.push(grads.wrt(w_var.expect("prior bound")));
            }
            clip_grad_norm(&mut gs, cfg.clip);
            let lr = cosine_lr(cfg.lr, step, total);
            let mut params: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
            if with_prior {
                params.push(prior.w.clone());
            }
            adamw_step(&mut params, &gs, &mut state, &opt, lr)?;
            if with_prior {
                prior.w = params.pop().expect("prior param");
            }
            for (dst, src) in model.tensors_mut().into_iter().zip(params) {
                *dst = src;
            }
            // Non-finite weights would make the next loss NaN.
            if !prior.w.is_finite() || !model.tensors().iter().all(|t| t.is_finite()) {
                return Err(LmError::Diverged { epoch, step, ce: ce_v, margin, saturated: step_saturated });
            }
            ce_sum += ce_v;
            margin_sum += margin;
            saturated += step_saturated;
            log.loss_trace.push(loss_v);
            log.margin_trace.push(margin);
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            train_bpc: bpc(ce_sum / steps as f64),
            val_bpc: eval_bpc(&model, &corpus.val, cfg.eval_windows, cfg.batch)?,
            margin_loss: margin_sum / steps as f64,
            saturated,
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    Ok(Trained { model, prior, log })
}

/// Fresh standard-normal noise `[b, t, d]` scaled by `sigma`.
pub fn gaussian_noise(rng: &mut attnprior_core::rng::Rng, shape: [usize; 3], sigma: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, sigma)).expect("shape")
}
