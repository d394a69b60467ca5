//! The causal attention prior over embedding sequences.
//!
//! Each position is modelled as `x_t = μ_t(x_<t) + σ ε_t` with `μ_t` the
//! attention-weighted mean of earlier values, so the residual map
//! `x ↦ e` is block lower-triangular and its log-determinant is a sum of
//! per-position diagonal-block terms. Positions are 0-based throughout.

pub mod checks;
mod figures;
mod penalty;
mod sampling;

pub use figures::{figure2_sweep, figure3_population, Figure2Config, Figure2Row, Figure3Config, Figure3Row, Figure3Table, FactorRow};
pub use penalty::{margin_penalty, residual_energy, strict_weights, PenaltyOutput, Reduction};
pub use sampling::{ancestral_sample, solve_position};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::linalg::{self, DET_FLOOR};
use crate::tensor::Tensor;

/// Which earlier positions a query attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Masking {
    /// `s < t`; the first position has an empty context.
    Strict,
    /// `s <= t`.
    Inclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarginKind {
    /// `|det|` of the diagonal block.
    Det,
    /// `1 - ρ(Σ_t A)`.
    Spectral,
}

/// Query/key/value maps, noise scale and masking of a single-head prior.
///
/// The coupling matrix `A = W_Kᵀ W_Q` is cached and refreshed by the setters.
#[derive(Clone, Debug)]
pub struct AttentionPriorParams {
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    sigma: f64,
    mode: Masking,
    coupling: Tensor,
}

impl AttentionPriorParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, sigma: f64, mode: Masking) -> Result<Self> {
        let d = w_q.rows();
        for (name, m) in [("W_Q", &w_q), ("W_K", &w_k), ("W_V", &w_v)] {
            if m.ndim() != 2 || m.rows() != d || m.cols() != d {
                return Err(Error::dim(format!("{name} must be {d}x{d}, got {:?}", m.shape())));
            }
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        let coupling = w_k.transpose().matmul(&w_q)?;
        Ok(AttentionPriorParams {
            w_q,
            w_k,
            w_v,
            sigma,
            mode,
            coupling,
        })
    }

    /// The one-dimensional prior with `W_Q = a`, `W_K = W_V = 1`.
    pub fn scalar(a: f64, sigma: f64, mode: Masking) -> Result<Self> {
        let one = || Tensor::matrix(1, 1, vec![1.0]).unwrap();
        AttentionPriorParams::new(Tensor::matrix(1, 1, vec![a])?, one(), one(), sigma, mode)
    }

    /// Values equal to embeddings and logits `x_tᵀ W x_s`; then `A = Wᵀ`.
    pub fn from_bilinear(w: &Tensor, sigma: f64, mode: Masking) -> Result<Self> {
        let d = w.rows();
        AttentionPriorParams::new(w.transpose(), Tensor::eye(d), Tensor::eye(d), sigma, mode)
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn w_q(&self) -> &Tensor {
        &self.w_q
    }

    pub fn w_k(&self) -> &Tensor {
        &self.w_k
    }

    pub fn w_v(&self) -> &Tensor {
        &self.w_v
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mode(&self) -> Masking {
        self.mode
    }

    pub fn coupling(&self) -> &Tensor {
        &self.coupling
    }

    pub fn set_w_q(&mut self, w_q: Tensor) -> Result<()> {
        *self = AttentionPriorParams::new(w_q, self.w_k.clone(), self.w_v.clone(), self.sigma, self.mode)?;
        Ok(())
    }

    pub fn set_w_k(&mut self, w_k: Tensor) -> Result<()> {
        *self = AttentionPriorParams::new(self.w_q.clone(), w_k, self.w_v.clone(), self.sigma, self.mode)?;
        Ok(())
    }

    pub fn with_mode(mut self, mode: Masking) -> Self {
        self.mode = mode;
        self
    }

    /// Whether the cached coupling still equals `W_Kᵀ W_Q`.
    pub fn coupling_cache_consistent(&self) -> bool {
        let fresh = self.w_k.transpose().matmul(&self.w_q).expect("square");
        fresh.max_abs_diff(&self.coupling) <= 1e-12 * fresh.data().iter().fold(1.0f64, |m, v| m.max(v.abs()))
    }

    /// Overwrites one entry of the cached coupling without touching `W_Q` or
    /// `W_K`. Exists so that checks can be shown to catch a stale cache.
    #[doc(hidden)]
    pub fn corrupt_coupling_cache(&mut self, delta: f64) {
        self.coupling.data_mut()[0] += delta;
    }
}

/// An `L x d` embedding sequence with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    x: Tensor,
}

impl EmbeddingSequence {
    pub fn new(x: Tensor) -> Result<Self> {
        if x.ndim() != 2 || x.rows() == 0 || x.cols() == 0 {
            return Err(Error::dim(format!("embedding sequence must be L x d with L, d >= 1, got {:?}", x.shape())));
        }
        if !x.is_finite() {
            return Err(Error::InvalidParameter("embedding sequence has non-finite entries".into()));
        }
        Ok(EmbeddingSequence { x })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        EmbeddingSequence::new(Tensor::from_rows(rows)?)
    }

    /// A one-dimensional sequence.
    pub fn scalars(values: &[f64]) -> Result<Self> {
        EmbeddingSequence::new(Tensor::matrix(values.len(), 1, values.to_vec())?)
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.x.row(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.x
    }

    /// The first `n` positions.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Index { index: n, len: self.len() });
        }
        let d = self.dim();
        Ok(EmbeddingSequence {
            x: Tensor::matrix(n, d, self.x.data()[..n * d].to_vec())?,
        })
    }
}

/// Attention statistics and Jacobian information at one position.
#[derive(Clone, Debug, Serialize)]
pub struct PositionStats {
    pub t: usize,
    /// Weights over the context `0..t` (strict) or `0..=t` (inclusive).
    pub alpha: Vec<f64>,
    pub v_bar: Vec<f64>,
    /// `Σ_s α_s (v_s - v̄)(v_s - v̄)ᵀ`, row-major `d x d`.
    pub cov: Vec<f64>,
    /// `Σ_s α_s (v_s - v̄) k_sᵀ`, row-major `d x d`.
    pub cross_cov: Vec<f64>,
    /// Weight on the position itself; zero under strict masking.
    pub alpha_tt: f64,
    /// `∂e_t/∂x_t`, row-major `d x d`.
    pub diag_block: Vec<f64>,
    pub det: f64,
    pub margin_det: f64,
    pub margin_spectral: f64,
}

impl PositionStats {
    pub fn dim(&self) -> usize {
        self.v_bar.len()
    }

    /// `Σ_t A` with the parameters' cached coupling.
    pub fn cov_times_coupling(&self, params: &AttentionPriorParams) -> Vec<f64> {
        linalg::matmul_sq(&self.cov, params.coupling().data(), self.dim())
    }

    /// Whether this position's diagonal block is orientation-preserving and
    /// bounded away from singular.
    pub fn is_valid(&self) -> bool {
        self.det > DET_FLOOR
    }
}

struct Projections {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    d: usize,
}

fn project(x: &Tensor, w: &Tensor) -> Vec<f64> {
    x.matmul(&w.transpose()).expect("square weights").into_data()
}

impl Projections {
    fn new(params: &AttentionPriorParams, x: &EmbeddingSequence) -> Result<Self> {
        if x.dim() != params.dim() {
            return Err(Error::dim(format!(
                "embedding dim {} but prior dim {}",
                x.dim(),
                params.dim()
            )));
        }
        Ok(Projections {
            q: project(x.tensor(), &params.w_q),
            k: project(x.tensor(), &params.w_k),
            v: project(x.tensor(), &params.w_v),
            d: params.dim(),
        })
    }

    fn row<'a>(&self, m: &'a [f64], s: usize) -> &'a [f64] {
        &m[s * self.d..(s + 1) * self.d]
    }
}

fn stats_at(params: &AttentionPriorParams, p: &Projections, t: usize) -> PositionStats {
    let d = p.d;
    let ctx = match params.mode {
        Masking::Strict => t,
        Masking::Inclusive => t + 1,
    };
    let mut v_bar = vec![0.0; d];
    let mut cov = vec![0.0; d * d];
    let mut cross_cov = vec![0.0; d * d];
    let mut alpha = Vec::with_capacity(ctx);
    let mut block = Tensor::eye(d).into_data();
    if ctx > 0 {
        let q = p.row(&p.q, t);
        let logits: Vec<f64> = (0..ctx)
            .map(|s| q.iter().zip(p.row(&p.k, s)).map(|(a, b)| a * b).sum())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        alpha = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = alpha.iter().sum();
        alpha.iter_mut().for_each(|a| *a /= z);
        for (s, &a) in alpha.iter().enumerate() {
            for (j, vj) in p.row(&p.v, s).iter().enumerate() {
                v_bar[j] += a * vj;
            }
        }
        for (s, &a) in alpha.iter().enumerate() {
            let vs = p.row(&p.v, s);
            let ks = p.row(&p.k, s);
            for i in 0..d {
                let ci = a * (vs[i] - v_bar[i]);
                for j in 0..d {
                    cov[i * d + j] += ci * (vs[j] - v_bar[j]);
                    cross_cov[i * d + j] += ci * ks[j];
                }
            }
        }
        block = match params.mode {
            Masking::Strict => strict_block_from_parts(params, &cross_cov),
            Masking::Inclusive => {
                let v_dev: Vec<f64> = p.row(&p.v, t).iter().zip(&v_bar).map(|(a, b)| a - b).collect();
                inclusive_block_from_parts(params, &cross_cov, alpha[t], &v_dev, q)
            }
        };
    }
    let det = linalg::det(&block, d);
    let sa = linalg::matmul_sq(&cov, params.coupling.data(), d);
    PositionStats {
        t,
        alpha_tt: match params.mode {
            Masking::Inclusive => alpha[t],
            Masking::Strict => 0.0,
        },
        alpha,
        v_bar,
        cov,
        cross_cov,
        diag_block: block,
        det,
        margin_det: det.abs(),
        margin_spectral: 1.0 - linalg::spectral_radius(&sa, d),
    }
}

/// `I - CrossCov·W_Q`: only the query depends on `x_t`.
pub fn strict_block_from_parts(params: &AttentionPriorParams, cross_cov: &[f64]) -> Vec<f64> {
    let d = params.dim();
    let mut block = linalg::matmul_sq(cross_cov, params.w_q.data(), d);
    block.iter_mut().for_each(|v| *v = -*v);
    for i in 0..d {
        block[i * d + i] += 1.0;
    }
    block
}

/// Diagonal block when `x_t` also enters its own value and key:
/// `I - CrossCov·W_Q - α_tt W_V - α_tt (v_t - v̄) q_tᵀ W_K`.
pub fn inclusive_block_from_parts(
    params: &AttentionPriorParams,
    cross_cov: &[f64],
    alpha_tt: f64,
    v_dev: &[f64],
    q_t: &[f64],
) -> Vec<f64> {
    let d = params.dim();
    let mut block = strict_block_from_parts(params, cross_cov);
    for (b, wv) in block.iter_mut().zip(params.w_v.data()) {
        *b -= alpha_tt * wv;
    }
    let wk = params.w_k.data();
    for j in 0..d {
        let qk: f64 = (0..d).map(|i| q_t[i] * wk[i * d + j]).sum();
        for i in 0..d {
            block[i * d + j] -= alpha_tt * v_dev[i] * qk;
        }
    }
    block
}

/// Context mean `μ_t` and statistics at position `t`. Under strict masking
/// the first position has no context and gets `μ = 0`, `Σ = 0` and an
/// identity block.
pub fn context_summary(
    params: &AttentionPriorParams,
    x: &EmbeddingSequence,
    t: usize,
) -> Result<(Vec<f64>, PositionStats)> {
    if t >= x.len() {
        return Err(Error::Index { index: t, len: x.len() });
    }
    let p = Projections::new(params, x)?;
    let stats = stats_at(params, &p, t);
    Ok((stats.v_bar.clone(), stats))
}

/// Statistics at every position.
pub fn all_stats(params: &AttentionPriorParams, x: &EmbeddingSequence) -> Result<Vec<PositionStats>> {
    let p = Projections::new(params, x)?;
    Ok((0..x.len()).map(|t| stats_at(params, &p, t)).collect())
}

/// Residuals `e_t = x_t - μ_t`, as an `L x d` tensor.
pub fn residuals(params: &AttentionPriorParams, x: &EmbeddingSequence) -> Result<Tensor> {
    let stats = all_stats(params, x)?;
    let mut e = x.tensor().clone();
    let d = x.dim();
    for s in &stats {
        for j in 0..d {
            e.data_mut()[s.t * d + j] -= s.v_bar[j];
        }
    }
    Ok(e)
}

/// `1 - a · Var` with `Var = Σ α (v - v̄)²`: the one-dimensional diagonal
/// derivative under strict masking.
pub fn scalar_diag_derivative(a: f64, alpha: &[f64], v: &[f64]) -> f64 {
    1.0 - a * weighted_variance(alpha, v)
}

pub fn weighted_variance(alpha: &[f64], v: &[f64]) -> f64 {
    let mean: f64 = alpha.iter().zip(v).map(|(a, x)| a * x).sum();
    alpha.iter().zip(v).map(|(a, x)| a * (x - mean).powi(2)).sum()
}

/// `∂e_t/∂x_t` as a `d x d` tensor.
pub fn diag_jacobian_block(params: &AttentionPriorParams, x: &EmbeddingSequence, t: usize) -> Result<Tensor> {
    let (_, s) = context_summary(params, x, t)?;
    Tensor::matrix(s.dim(), s.dim(), s.diag_block)
}

/// The self-inclusive block restricted to the value and query paths,
/// `(1 - α_tt) I - CrossCov·W_Q` for `W_V = I`. It omits the dependence of
/// the self-key `k_t` on `x_t`, so it differs from [`diag_jacobian_block`]
/// by `α_tt (v_t - v̄) q_tᵀ W_K`.
pub fn inclusive_query_path_block(stats: &PositionStats, params: &AttentionPriorParams) -> Vec<f64> {
    let d = stats.dim();
    let mut block = linalg::matmul_sq(&stats.cross_cov, params.w_q.data(), d);
    block.iter_mut().for_each(|v| *v = -*v);
    for i in 0..d {
        block[i * d + i] += 1.0 - stats.alpha_tt;
    }
    block
}

pub fn margin(params: &AttentionPriorParams, x: &EmbeddingSequence, t: usize, kind: MarginKind) -> Result<f64> {
    let (_, s) = context_summary(params, x, t)?;
    Ok(match kind {
        MarginKind::Det => s.margin_det,
        MarginKind::Spectral => s.margin_spectral,
    })
}

/// Margins closer than this to the minimum count as ties.
pub const SUPPORT_TIE_TOL: f64 = 1e-9;

/// Minimum margin over positions and every position attaining it.
pub fn sequence_margin_and_support(
    params: &AttentionPriorParams,
    x: &EmbeddingSequence,
    kind: MarginKind,
) -> Result<(f64, Vec<usize>)> {
    let margins: Vec<f64> = all_stats(params, x)?
        .iter()
        .map(|s| match kind {
            MarginKind::Det => s.margin_det,
            MarginKind::Spectral => s.margin_spectral,
        })
        .collect();
    Ok(min_and_support(&margins))
}

fn min_and_support(margins: &[f64]) -> (f64, Vec<usize>) {
    let min = margins.iter().cloned().fold(f64::INFINITY, f64::min);
    let support = margins
        .iter()
        .enumerate()
        .filter(|(_, &m)| m - min <= SUPPORT_TIE_TOL)
        .map(|(t, _)| t)
        .collect();
    (min, support)
}

/// Exact change-of-variables log-density and its parts.
#[derive(Clone, Debug, Serialize)]
pub struct DensityReport {
    pub residuals: Vec<Vec<f64>>,
    pub quad_energy: f64,
    /// `log|det|` of each diagonal block; `-inf` at invalid positions.
    #[serde(serialize_with = "crate::report::ser_f64_vec")]
    pub logdet_terms: Vec<f64>,
    #[serde(serialize_with = "crate::report::ser_f64")]
    pub total_log_density: f64,
    pub margins: Vec<f64>,
    pub sequence_margin: f64,
    pub support_tokens: Vec<usize>,
    pub valid: bool,
}

impl DensityReport {
    /// Gaussian normalizer `-L·d·log σ - (L·d/2)·log 2π`.
    pub fn normalizer(len: usize, dim: usize, sigma: f64) -> f64 {
        let n = (len * dim) as f64;
        -n * sigma.ln() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Log-density of `x` under the prior, assembled from per-position terms.
///
/// Validity requires every diagonal block determinant to exceed the
/// determinant floor; otherwise the total is `-inf`.
pub fn log_density(params: &AttentionPriorParams, x: &EmbeddingSequence) -> Result<DensityReport> {
    let stats = all_stats(params, x)?;
    let d = x.dim();
    let sigma = params.sigma;
    let mut residuals = Vec::with_capacity(x.len());
    let mut quad = 0.0;
    let mut logdet_terms = Vec::with_capacity(x.len());
    let mut valid = true;
    for s in &stats {
        let e: Vec<f64> = x.row(s.t).iter().zip(&s.v_bar).map(|(a, b)| a - b).collect();
        quad += e.iter().map(|v| v * v).sum::<f64>() / (2.0 * sigma * sigma);
        residuals.push(e);
        if s.is_valid() {
            logdet_terms.push(s.det.ln());
        } else {
            valid = false;
            logdet_terms.push(f64::NEG_INFINITY);
        }
    }
    let total = if valid {
        -quad + logdet_terms.iter().sum::<f64>() + DensityReport::normalizer(x.len(), d, sigma)
    } else {
        f64::NEG_INFINITY
    };
    let margins: Vec<f64> = stats.iter().map(|s| s.margin_det).collect();
    let (sequence_margin, support_tokens) = min_and_support(&margins);
    Ok(DensityReport {
        residuals,
        quad_energy: quad,
        logdet_terms,
        total_log_density: total,
        margins,
        sequence_margin,
        support_tokens,
        valid,
    })
}

/// Conditional log-density of `x_t` given `x_<t`. Under strict masking this
/// is the position-`t` share of [`log_density`].
pub fn position_log_density(params: &AttentionPriorParams, x: &EmbeddingSequence, t: usize) -> Result<f64> {
    let (mu, s) = context_summary(params, x, t)?;
    if !s.is_valid() {
        return Ok(f64::NEG_INFINITY);
    }
    let sigma = params.sigma;
    let quad: f64 = x.row(t).iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * sigma * sigma);
    Ok(-quad + s.det.ln() + DensityReport::normalizer(1, x.dim(), sigma))
}
