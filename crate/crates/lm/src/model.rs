//! `SmallGpt`: token and learned position embeddings, pre-norm blocks, a final
//! LayerNorm and a linear head.

use attnprior_core::nn::{block, BlockWeights, LayerNorm, BLOCK_PARAM_NAMES, LN_EPS};
use attnprior_core::rng::{normal_vec, Rng};
use attnprior_core::{Graph, Tensor, Var};
use rand::Rng as _;

use crate::config::GptConfig;
use crate::error::{LmError, Result};

/// Standard deviation of every initial weight matrix and embedding.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct SmallGpt {
    pub cfg: GptConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_f: LayerNorm,
    /// `[d, vocab]`; absent when the head is tied to `tok_emb`.
    pub head_w: Option<Tensor>,
    pub head_b: Tensor,
}

/// The `d x d` matrix `W` of the embedding-level attention prior.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPrior {
    pub w: Tensor,
}

impl EmbeddingPrior {
    pub fn zeros(d: usize) -> Self {
        EmbeddingPrior { w: Tensor::zeros(&[d, d]) }
    }
}

/// Tape nodes produced by one forward pass.
pub struct ForwardOut {
    /// Embedding-layer output `[B, T, d]`, after positions, noise and dropout.
    pub emb: Var,
    /// `[B, T, vocab]`.
    pub logits: Var,
}

/// Perturbations applied to the embedding-layer output.
#[derive(Default)]
pub struct EmbeddingNoise<'a> {
    /// Added as-is; shape `[B, T, d]`.
    pub additive: Option<&'a Tensor>,
    /// Inverted dropout with this rate, drawing the mask from the rng.
    pub dropout: Option<(f64, &'a mut Rng)>,
}

impl SmallGpt {
    pub fn init(cfg: &GptConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, v) = (cfg.d_model, cfg.vocab);
        let proj_std = INIT_STD / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        let tok_emb = Tensor::matrix(v, d, normal_vec(rng, v * d, INIT_STD))?;
        let pos_emb = Tensor::matrix(cfg.context, d, normal_vec(rng, cfg.context * d, INIT_STD))?;
        let blocks = (0..cfg.n_layers).map(|_| BlockWeights::init(d, INIT_STD, proj_std, rng)).collect();
        let head_w = if cfg.tied { None } else { Some(Tensor::matrix(d, v, normal_vec(rng, d * v, INIT_STD))?) };
        Ok(SmallGpt {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(d),
            head_w,
            head_b: Tensor::zeros(&[v]),
        })
    }

    /// Parameter names in [`SmallGpt::tensors`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for i in 0..self.blocks.len() {
            names.extend(BLOCK_PARAM_NAMES.iter().map(|n| format!("blocks.{i}.{n}")));
        }
        names.extend(["ln_f.gamma".to_string(), "ln_f.beta".to_string()]);
        if self.head_w.is_some() {
            names.push("head.w".to_string());
        }
        names.push("head.b".to_string());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.ln_f.gamma, &self.ln_f.beta]);
        out.extend(self.head_w.as_ref());
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut self.ln_f.gamma, &mut self.ln_f.beta]);
        out.extend(self.head_w.as_mut());
        out.push(&mut self.head_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter on `g`, in [`SmallGpt::tensors`] order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Embedding-layer output for `ids` laid out `[batch, t]`.
    pub fn embed(&self, g: &mut Graph, vars: &[Var], ids: &[usize], batch: usize, noise: EmbeddingNoise) -> Result<Var> {
        let t = ids.len() / batch.max(1);
        if batch == 0 || t == 0 || batch * t != ids.len() || t > self.cfg.context {
            return Err(LmError::Config(format!(
                "{} ids cannot form {batch} windows of at most {} tokens",
                ids.len(),
                self.cfg.context
            )));
        }
        let tok = g.embedding(vars[0], ids, &[batch, t])?;
        let pos = g.slice(vars[1], 0, 0, t)?;
        let mut x = g.add_broadcast(tok, pos)?;
        if let Some(n) = noise.additive {
            let n = g.constant(n.clone());
            x = g.add(x, n)?;
        }
        if let Some((p, rng)) = noise.dropout {
            if p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> =
                    (0..batch * t * self.cfg.d_model).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
                let mask = g.constant(Tensor::new(vec![batch, t, self.cfg.d_model], mask)?);
                x = g.mul(x, mask)?;
            }
        }
        Ok(x)
    }

    /// Logits from an embedding-layer output.
    pub fn head(&self, g: &mut Graph, vars: &[Var], emb: Var) -> Result<Var> {
        let per_block = BLOCK_PARAM_NAMES.len();
        let mut h = emb;
        for i in 0..self.blocks.len() {
            let bv = attnprior_core::nn::BlockVars { vars: vars[2 + i * per_block..2 + (i + 1) * per_block].to_vec() };
            h = block(g, &bv, h, None, self.cfg.n_heads)?;
        }
        let k = 2 + self.blocks.len() * per_block;
        let h = g.layer_norm(h, vars[k], vars[k + 1], LN_EPS)?;
        let logits = match self.head_w {
            Some(_) => g.matmul(h, vars[k + 2])?,
            None => g.matmul_t(h, vars[0], false, true)?,
        };
        let b = *vars.last().expect("head bias");
        Ok(g.add_broadcast(logits, b)?)
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], ids: &[usize], batch: usize, noise: EmbeddingNoise) -> Result<ForwardOut> {
        let emb = self.embed(g, vars, ids, batch, noise)?;
        let logits = self.head(g, vars, emb)?;
        Ok(ForwardOut { emb, logits })
    }
}
