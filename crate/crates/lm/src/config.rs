//! Model and training configuration, with the desk and full-size presets.

use serde::{Deserialize, Serialize};

use crate::error::{LmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GptConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Context length `T`.
    pub context: usize,
    pub vocab: usize,
    /// Applied to the embedding-layer outputs during training.
    pub dropout: f64,
    /// Share the token embedding with the output projection.
    pub tied: bool,
}

impl GptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(LmError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context < 2 || self.vocab < 2 {
            return Err(LmError::Config("context and vocab must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LmError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Margin-penalty weight `λ_m`.
    pub lambda_m: f64,
    /// Prior noise scale; read only when `quadratic` is set.
    pub sigma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub clip: f64,
    pub seed: u64,
    /// Add the prior's residual energy to the penalty.
    pub quadratic: bool,
    /// Keep the prior's `W` at its initial value.
    pub freeze_prior: bool,
    /// Optimizer steps per epoch; 0 means one pass over the training tokens
    /// in non-overlapping windows.
    pub steps_per_epoch: usize,
    /// Validation windows per evaluation; 0 means all.
    pub eval_windows: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LmError::Config(m.into()));
        if !(self.lambda_m >= 0.0) || !self.lambda_m.is_finite() {
            return bad("lambda_m must be a finite nonnegative number");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(self.clip > 0.0) {
            return bad("lr and clip must be positive, weight decay nonnegative");
        }
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = LmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(LmError::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

/// Everything a training command needs besides the corpus path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub gpt: GptConfig,
    pub train: TrainConfig,
    pub min_count: usize,
    pub lambdas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub noise_draws: usize,
}

pub const DEFAULT_LAMBDAS: [f64; 7] = [0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2];
pub const DEFAULT_LAMBDA: f64 = 0.05;

/// 11 equally spaced noise levels in `[0, sigma_max]`.
pub fn sigma_grid(sigma_max: f64) -> Vec<f64> {
    (0..11).map(|i| sigma_max * i as f64 / 10.0).collect()
}

impl Preset {
    pub fn config(self) -> ExperimentConfig {
        match self {
            Preset::Desk => ExperimentConfig {
                gpt: GptConfig {
                    d_model: 32,
                    n_heads: 2,
                    n_layers: 2,
                    context: 64,
                    vocab: 0,
                    dropout: 0.0,
                    tied: false,
                },
                train: TrainConfig {
                    lambda_m: DEFAULT_LAMBDA,
                    sigma: 1.0,
                    lr: 1e-2,
                    weight_decay: 1e-4,
                    epochs: 5,
                    batch: 32,
                    clip: 1.0,
                    seed: 0,
                    quadratic: false,
                    freeze_prior: false,
                    steps_per_epoch: 60,
                    eval_windows: 256,
                },
                min_count: 50,
                lambdas: DEFAULT_LAMBDAS.to_vec(),
                sigmas: sigma_grid(0.5),
                noise_draws: 5,
            },
            Preset::Paper => ExperimentConfig {
                gpt: GptConfig {
                    d_model: 128,
                    n_heads: 4,
                    n_layers: 2,
                    context: 512,
                    vocab: 0,
                    dropout: 0.0,
                    tied: false,
                },
                train: TrainConfig {
                    lambda_m: DEFAULT_LAMBDA,
                    sigma: 1.0,
                    lr: 1e-3,
                    weight_decay: 1e-4,
                    epochs: 30,
                    batch: 64,
                    clip: 1.0,
                    seed: 0,
                    quadratic: false,
                    freeze_prior: false,
                    steps_per_epoch: 0,
                    eval_windows: 0,
                },
                min_count: 50,
                lambdas: DEFAULT_LAMBDAS.to_vec(),
                sigmas: sigma_grid(0.5),
                noise_draws: 5,
            },
        }
    }
}
