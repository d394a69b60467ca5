//! Pre-norm transformer block recorded on the autodiff tape.

use crate::error::Result;
use crate::rng::{normal_vec, Rng};
use crate::tensor::graph::Mask;
use crate::tensor::{Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Affine map `x·W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init(d_in: usize, d_out: usize, std: f64, rng: &mut Rng) -> Self {
        Linear {
            w: Tensor::matrix(d_in, d_out, normal_vec(rng, d_in * d_out, std)).expect("shape"),
            b: Tensor::zeros(&[d_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }
}

/// LN → causal multi-head attention → residual → LN → MLP → residual.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc: Linear,
    pub proj: Linear,
}

pub const BLOCK_PARAM_NAMES: [&str; 16] = [
    "ln1.gamma", "ln1.beta", "q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "o.w", "o.b", "ln2.gamma", "ln2.beta",
    "fc.w", "fc.b", "proj.w", "proj.b",
];

impl BlockWeights {
    /// Weights `N(0, std²)`; output projections use `proj_std`. Biases start at
    /// zero and LayerNorms at the identity.
    pub fn init(d: usize, std: f64, proj_std: f64, rng: &mut Rng) -> Self {
        BlockWeights {
            ln1: LayerNorm::new(d),
            q: Linear::init(d, d, std, rng),
            k: Linear::init(d, d, std, rng),
            v: Linear::init(d, d, std, rng),
            o: Linear::init(d, d, proj_std, rng),
            ln2: LayerNorm::new(d),
            fc: Linear::init(d, 4 * d, std, rng),
            proj: Linear::init(4 * d, d, proj_std, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.ln1.gamma.len()
    }

    /// Parameters in [`BLOCK_PARAM_NAMES`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.ln1.gamma, &self.ln1.beta, &self.q.w, &self.q.b, &self.k.w, &self.k.b, &self.v.w, &self.v.b,
            &self.o.w, &self.o.b, &self.ln2.gamma, &self.ln2.beta, &self.fc.w, &self.fc.b, &self.proj.w,
            &self.proj.b,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.ln1.gamma, &mut self.ln1.beta, &mut self.q.w, &mut self.q.b, &mut self.k.w, &mut self.k.b,
            &mut self.v.w, &mut self.v.b, &mut self.o.w, &mut self.o.b, &mut self.ln2.gamma, &mut self.ln2.beta,
            &mut self.fc.w, &mut self.fc.b, &mut self.proj.w, &mut self.proj.b,
        ]
    }

    /// Registers the weights on `g`, as trainable parameters or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BlockVars {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        BlockVars { vars }
    }
}

/// A block's weights as tape nodes, in [`BLOCK_PARAM_NAMES`] order.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub vars: Vec<Var>,
}

impl BlockVars {
    fn linear(&self, i: usize) -> (Var, Var) {
        (self.vars[i], self.vars[i + 1])
    }
}

pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, b)
}

/// Causal multi-head attention over `[B, T, d]` inputs. Keys and values come
/// from `kv`; queries from `q_src`, which is `kv` in a standard block.
pub fn attention(g: &mut Graph, p: &BlockVars, kv: Var, q_src: Var, heads: usize) -> Result<Var> {
    let d = g.shape(kv)[2];
    let (wq, bq) = p.linear(2);
    let (wk, bk) = p.linear(4);
    let (wv, bv) = p.linear(6);
    let (wo, bo) = p.linear(8);
    let q = linear(g, q_src, wq, bq)?;
    let k = linear(g, kv, wk, bk)?;
    let v = linear(g, kv, wv, bv)?;
    let q = g.split_heads(q, heads)?;
    let k = g.split_heads(k, heads)?;
    let v = g.split_heads(v, heads)?;
    let logits = g.matmul_t(q, k, false, true)?;
    let logits = g.scale(logits, 1.0 / ((d / heads) as f64).sqrt());
    let att = g.masked_softmax(logits, Mask::Inclusive, 0)?;
    let y = g.matmul(att, v)?;
    let y = g.merge_heads(y)?;
    linear(g, y, wo, bo)
}

pub fn mlp(g: &mut Graph, p: &BlockVars, x: Var) -> Result<Var> {
    let (wf, bf) = p.linear(12);
    let (wp, bp) = p.linear(14);
    let h = linear(g, x, wf, bf)?;
    let h = g.gelu(h);
    linear(g, h, wp, bp)
}

/// One pre-norm block on `[B, T, d]`. With `query_src`, attention queries are
/// formed from that tensor as given, bypassing the first LayerNorm.
pub fn block(g: &mut Graph, p: &BlockVars, x: Var, query_src: Option<Var>, heads: usize) -> Result<Var> {
    let (g1, b1) = p.linear(0);
    let (g2, b2) = p.linear(10);
    let a = g.layer_norm(x, g1, b1, LN_EPS)?;
    let q = query_src.unwrap_or(a);
    let att = attention(g, p, a, q, heads)?;
    let h = g.add(x, att)?;
    let n = g.layer_norm(h, g2, b2, LN_EPS)?;
    let m = mlp(g, p, n)?;
    g.add(h, m)
}
