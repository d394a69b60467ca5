//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in execution order, so parents always
//! precede children and the backward sweep is a single reverse scan. Graphs
//! are cheap to build and are meant to be thrown away after each step.

use super::gemm::{gemm, MatRef};
use super::linalg::Lu;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which keys a query row may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    /// Row `i` sees keys `j < i + offset`.
    Strict,
    /// Row `i` sees keys `j <= i + offset`.
    Inclusive,
    None,
}

impl Mask {
    pub fn allows(self, row: usize, key: usize, row_offset: usize) -> bool {
        match self {
            Mask::Strict => key < row + row_offset,
            Mask::Inclusive => key <= row + row_offset,
            Mask::None => true,
        }
    }
}

/// Behavior of [`Graph::logabsdet`] when `|det| < floor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DetFloor {
    /// Report `-inf`.
    Sentinel(f64),
    /// Report `ln(floor)` with zero gradient.
    Clamp(f64),
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gelu(Var),
    EyeMinus(Var),
    MaskedSoftmax(Var),
    LogAbsDet { x: Var, inv_t: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads(Var),
    Slice { x: Var, axis: usize, start: usize },
    WeightedCov { p: Var, x: Var, xbar: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn leading(shape: &[usize], keep: usize) -> usize {
    shape[..shape.len() - keep].iter().product()
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4;
    const K: f64 = 0.044_715;
    let u = C * (x + K * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Matrix product over the last two axes, optionally transposing either
    /// operand. `b` may be 2-d, in which case it is shared across the batch.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!("matmul needs matrices, got {sa:?} and {sb:?}")));
        }
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        let broadcast = sb.len() == 2;
        if k != k2 || (!broadcast && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::dim(format!(
                "matmul {sa:?}{} x {sb:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let batch = leading(&sa, 2);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let opb = |data| if tb { MatRef::transposed(data, k) } else { MatRef::row_major(data, n) };
        if broadcast && !ta {
            gemm(batch * m, k, n, 1.0, MatRef::row_major(ad, k), opb(bd), 0.0, &mut out);
        } else {
            for i in 0..batch {
                let aslice = &ad[i * m * k..(i + 1) * m * k];
                let bslice = if broadcast { bd } else { &bd[i * k * n..(i + 1) * k * n] };
                let opa = if ta { MatRef::transposed(aslice, m) } else { MatRef::row_major(aslice, k) };
                gemm(m, k, n, 1.0, opa, opb(bslice), 0.0, &mut out[i * m * n..(i + 1) * m * n]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!(
                "elementwise op on {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape matches the trailing axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let bd = self.value(b).data();
        let n = bd.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % n])
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::AddBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(t, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| gelu_parts(x).0);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// `I - a` for a stack of square matrices.
    pub fn eye_minus(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap_or(&0);
        if s.len() < 2 || s[s.len() - 2] != d {
            return Err(Error::dim(format!("eye_minus needs square matrices, got {s:?}")));
        }
        let mut data: Vec<f64> = self.value(a).data().iter().map(|v| -v).collect();
        for m in data.chunks_mut(d * d) {
            for i in 0..d {
                m[i * d + i] += 1.0;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(s, data)?, Op::EyeMinus(a), rg))
    }

    /// Softmax over the last axis of `[.., rows, keys]` logits, restricted to
    /// the keys `mask` admits. Masked entries are exactly zero.
    pub fn masked_softmax(&mut self, logits: Var, mask: Mask, row_offset: usize) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("masked_softmax needs at least 2 axes"));
        }
        let (rows, keys) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.value(logits).data();
        let mut out = vec![0.0; src.len()];
        for (blk, (o, x)) in out.chunks_mut(rows * keys).zip(src.chunks(rows * keys)).enumerate() {
            for r in 0..rows {
                let xr = &x[r * keys..(r + 1) * keys];
                let or = &mut o[r * keys..(r + 1) * keys];
                let allowed = |j: usize| mask.allows(r, j, row_offset);
                let max = (0..keys)
                    .filter(|&j| allowed(j))
                    .map(|j| xr[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                if !(0..keys).any(allowed) {
                    return Err(Error::EmptyContext { row: blk * rows + r });
                }
                if !max.is_finite() {
                    (0..keys).filter(|&j| allowed(j)).for_each(|j| or[j] = f64::NAN);
                    continue;
                }
                let mut z = 0.0;
                for j in (0..keys).filter(|&j| allowed(j)) {
                    let e = (xr[j] - max).exp();
                    or[j] = e;
                    z += e;
                }
                or.iter_mut().for_each(|v| *v /= z);
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::new(s, out)?, Op::MaskedSoftmax(logits), rg))
    }

    /// `log|det|` of each trailing `d x d` matrix. Returns the node and the
    /// number of matrices that fell below the floor.
    pub fn logabsdet(&mut self, x: Var, floor: DetFloor) -> Result<(Var, usize)> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if s.len() < 2 || s[s.len() - 2] != d {
            return Err(Error::dim(format!("logabsdet needs square matrices, got {s:?}")));
        }
        let (threshold, fallback) = match floor {
            DetFloor::Sentinel(f) => (f, f64::NEG_INFINITY),
            DetFloor::Clamp(f) => (f, f.ln()),
        };
        let mut values = Vec::with_capacity(leading(&s, 2));
        let mut inv_t = vec![0.0; self.value(x).len()];
        let mut saturated = 0;
        for (m, it) in self.value(x).data().chunks(d * d).zip(inv_t.chunks_mut(d * d)) {
            let lu = Lu::new(m, d);
            let (_, logabs) = lu.sign_logabsdet();
            if logabs < threshold.ln() || logabs.is_nan() {
                saturated += 1;
                values.push(fallback);
                continue;
            }
            let inv = lu.inverse().expect("nonsingular above the floor");
            for i in 0..d {
                for j in 0..d {
                    it[i * d + j] = inv[j * d + i];
                }
            }
            values.push(logabs);
        }
        let t = Tensor::new(s[..s.len() - 2].to_vec(), values)?;
        let rg = self.rg(&[x]);
        Ok((self.push(t, Op::LogAbsDet { x, inv_t }, rg), saturated))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm affine parameters must match the last axis"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(src.len() / d.max(1));
        for ((row, o), xh) in src.chunks(d).zip(out.chunks_mut(d)).zip(xhat.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                xh[j] = (row[j] - mean) * r;
                o[j] = xh[j] * g[j] + b[j];
            }
            rstd.push(r);
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// Mean cross-entropy in nats of `[.., vocab]` logits against targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let v = *s.last().unwrap_or(&0);
        let n = leading(&s, 1);
        if targets.len() != n {
            return Err(Error::dim(format!("{} targets for {n} rows", targets.len())));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for ((row, p), &y) in src.chunks(v).zip(probs.chunks_mut(v)).zip(targets) {
            if y >= v {
                return Err(Error::Index { index: y, len: v });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..v {
                p[j] = (row[j] - max).exp();
                z += p[j];
            }
            p.iter_mut().for_each(|e| *e /= z);
            loss += z.ln() + max - row[y];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Gathers rows of a `[vocab, d]` table; the result has shape
    /// `out_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("embedding table must be 2-d and ids must fill out_shape"));
        }
        let (vocab, d) = (s[0], s[1]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { index: id, len: vocab });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// `[B, T, H*dh] -> [B, H, T, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::dim(format!("cannot split {s:?} into {heads} heads")));
        }
        let (b, t, dh) = (s[0], s[1], s[2] / heads);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let from = (bi * t + ti) * s[2] + h * dh;
                    let to = ((bi * heads + h) * t + ti) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![b, heads, t, dh], out)?,
            Op::SplitHeads { x, heads },
            rg,
        ))
    }

    /// `[B, H, T, dh] -> [B, T, H*dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("merge_heads needs 4 axes, got {s:?}")));
        }
        let (b, heads, t, dh) = (s[0], s[1], s[2], s[3]);
        let out = merge_heads_data(self.value(x).data(), b, heads, t, dh);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, t, heads * dh], out)?, Op::MergeHeads(x), rg))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::dim(format!("slice {start}..{} of axis {axis} in {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Weighted covariance of rows of `x` under each weight row of `p`:
    /// `Σ_r = Σ_s p_rs x_s x_sᵀ - x̄_r x̄_rᵀ` with `x̄_r = Σ_s p_rs x_s`.
    ///
    /// `p: [.., R, S]`, `x: [.., S, d]` with matching leading axes; the
    /// result is `[.., R, d, d]`.
    pub fn weighted_cov(&mut self, p: Var, x: Var) -> Result<Var> {
        let sp = self.shape(p).to_vec();
        let sx = self.shape(x).to_vec();
        if sp.len() < 2
            || sx.len() != sp.len()
            || sp[..sp.len() - 2] != sx[..sx.len() - 2]
            || sp[sp.len() - 1] != sx[sx.len() - 2]
        {
            return Err(Error::dim(format!("weighted_cov {sp:?} with {sx:?}")));
        }
        let (r, s) = (sp[sp.len() - 2], sp[sp.len() - 1]);
        let d = sx[sx.len() - 1];
        let batch = leading(&sp, 2);
        let pd = self.value(p).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; batch * r * d * d];
        let mut xbar = vec![0.0; batch * r * d];
        let mut centered = vec![0.0; s * d];
        let mut weighted = vec![0.0; s * d];
        for bi in 0..batch {
            let xb = &xd[bi * s * d..(bi + 1) * s * d];
            for ri in 0..r {
                let prow = &pd[(bi * r + ri) * s..(bi * r + ri + 1) * s];
                let span = support_len(prow);
                let mean = &mut xbar[(bi * r + ri) * d..(bi * r + ri + 1) * d];
                for si in 0..span {
                    for j in 0..d {
                        mean[j] += prow[si] * xb[si * d + j];
                    }
                }
                for si in 0..span {
                    for j in 0..d {
                        let c = xb[si * d + j] - mean[j];
                        centered[si * d + j] = c;
                        weighted[si * d + j] = prow[si] * c;
                    }
                }
                gemm(
                    d,
                    span,
                    d,
                    1.0,
                    MatRef::transposed(&weighted[..span * d], d),
                    MatRef::row_major(&centered[..span * d], d),
                    0.0,
                    &mut out[(bi * r + ri) * d * d..(bi * r + ri + 1) * d * d],
                );
                // The centered sum equals the definition only for weights
                // summing to one; add back the difference otherwise.
                let excess = 1.0 - prow.iter().sum::<f64>();
                if excess != 0.0 {
                    let o = &mut out[(bi * r + ri) * d * d..(bi * r + ri + 1) * d * d];
                    for i in 0..d {
                        for j in 0..d {
                            o[i * d + j] += excess * mean[i] * mean[j];
                        }
                    }
                }
            }
        }
        let mut shape = sp[..sp.len() - 1].to_vec();
        shape.extend([d, d]);
        let rg = self.rg(&[p, x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::WeightedCov { p, x, xbar }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward needs a scalar loss"));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Reverse sweep seeded with an explicit upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(out).len() {
            return Err(Error::dim("seed gradient size mismatch"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (da, db) = self.matmul_backward(a, b, ta, tb, node.value.shape(), g);
                if let Some(da) = da {
                    self.accumulate(grads, a, da);
                }
                if let Some(db) = db {
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    self.accumulate(grads, a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            &Op::AddBroadcast(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                if self.wants(b) {
                    let n = self.value(b).len();
                    let mut db = vec![0.0; n];
                    for (k, v) in g.iter().enumerate() {
                        db[k % n] += v;
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, g.iter().map(|v| v * c).collect()),
            &Op::Sum(a) => self.accumulate(grads, a, vec![g[0]; self.value(a).len()]),
            &Op::Mean(a) => {
                let n = self.value(a).len();
                self.accumulate(grads, a, vec![g[0] / n as f64; n]);
            }
            &Op::Reshape(a) => self.accumulate(grads, a, g.to_vec()),
            &Op::Gelu(a) => {
                let d = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| gv * gelu_parts(x).1)
                    .collect();
                self.accumulate(grads, a, d);
            }
            &Op::EyeMinus(a) => self.accumulate(grads, a, g.iter().map(|v| -v).collect()),
            &Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let keys = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(keys).zip(g.chunks(keys)).zip(dx.chunks_mut(keys)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..keys {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::LogAbsDet { x, inv_t } => {
                let d = self.value(*x).cols();
                let mut dx = inv_t.clone();
                for (m, &gv) in dx.chunks_mut(d * d).zip(g) {
                    m.iter_mut().for_each(|v| *v *= gv);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                for (((gr, xh), dr), &r) in g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).zip(rstd) {
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gam[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        dr[j] = r * (gr[j] * gam[j] - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &y) in targets.iter().enumerate() {
                    dl[row * v + y] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                let mut dt = vec![0.0; self.value(*table).len()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[k * d + j];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            &Op::SplitHeads { x, heads } => {
                let s = node.value.shape();
                let dx = merge_heads_data(g, s[0], heads, s[2], s[3]);
                self.accumulate(grads, x, dx);
            }
            &Op::MergeHeads(x) => {
                let s = self.shape(x);
                let (b, heads, t, dh) = (s[0], s[1], s[2], s[3]);
                let mut dx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        for h in 0..heads {
                            let from = (bi * t + ti) * heads * dh + h * dh;
                            let to = ((bi * heads + h) * t + ti) * dh;
                            dx[to..to + dh].copy_from_slice(&g[from..from + dh]);
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            &Op::Slice { x, axis, start } => {
                let s = self.shape(x);
                let len = node.value.shape()[axis];
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut dx = vec![0.0; self.value(x).len()];
                for o in 0..outer {
                    let base = (o * s[axis] + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, x, dx);
            }
            Op::WeightedCov { p, x, xbar } => {
                let (dp, dx) = self.weighted_cov_backward(*p, *x, xbar, g);
                if let Some(dp) = dp {
                    self.accumulate(grads, *p, dp);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
            }
        }
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        out_shape: &[usize],
        g: &[f64],
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (m, n) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
        let sa = self.shape(a);
        let k = if ta { sa[sa.len() - 2] } else { sa[sa.len() - 1] };
        let batch = leading(out_shape, 2);
        let broadcast = self.shape(b).len() == 2;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let b_at = |i: usize| if broadcast { bd } else { &bd[i * k * n..(i + 1) * k * n] };

        let da = self.wants(a).then(|| {
            let mut da = vec![0.0; ad.len()];
            if broadcast && !ta {
                let opb_t = if tb { MatRef::row_major(bd, k) } else { MatRef::transposed(bd, n) };
                gemm(batch * m, n, k, 1.0, MatRef::row_major(g, n), opb_t, 0.0, &mut da);
                return da;
            }
            for i in 0..batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let bi = b_at(i);
                let dai = &mut da[i * m * k..(i + 1) * m * k];
                if !ta {
                    let opb_t = if tb { MatRef::row_major(bi, k) } else { MatRef::transposed(bi, n) };
                    gemm(m, n, k, 1.0, MatRef::row_major(gi, n), opb_t, 0.0, dai);
                } else {
                    let opb = if tb { MatRef::transposed(bi, k) } else { MatRef::row_major(bi, n) };
                    gemm(k, n, m, 1.0, opb, MatRef::transposed(gi, n), 0.0, dai);
                }
            }
            da
        });

        let db = self.wants(b).then(|| {
            let mut db = vec![0.0; bd.len()];
            if broadcast && !ta {
                let a_all = MatRef::row_major(ad, k);
                let g_all = MatRef::row_major(g, n);
                if tb {
                    gemm(n, batch * m, k, 1.0, MatRef::transposed(g, n), a_all, 0.0, &mut db);
                } else {
                    gemm(k, batch * m, n, 1.0, MatRef::transposed(ad, k), g_all, 0.0, &mut db);
                }
                return db;
            }
            for i in 0..batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let (dbi, beta) = if broadcast {
                    (&mut db[..], if i == 0 { 0.0 } else { 1.0 })
                } else {
                    (&mut db[i * k * n..(i + 1) * k * n], 0.0)
                };
                if !tb {
                    let opa_t = if ta { MatRef::row_major(ai, m) } else { MatRef::transposed(ai, k) };
                    gemm(k, m, n, 1.0, opa_t, MatRef::row_major(gi, n), beta, dbi);
                } else {
                    let opa = if ta { MatRef::transposed(ai, m) } else { MatRef::row_major(ai, k) };
                    gemm(n, m, k, 1.0, MatRef::transposed(gi, n), opa, beta, dbi);
                }
            }
            db
        });
        (da, db)
    }

    fn weighted_cov_backward(
        &self,
        p: Var,
        x: Var,
        xbar: &[f64],
        g: &[f64],
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let sp = self.shape(p);
        let (r, s) = (sp[sp.len() - 2], sp[sp.len() - 1]);
        let d = self.value(x).cols();
        let batch = leading(sp, 2);
        let pd = self.value(p).data();
        let xd = self.value(x).data();
        let want_p = self.wants(p);
        let want_x = self.wants(x);
        let mut dp = vec![0.0; if want_p { pd.len() } else { 0 }];
        let mut dx = vec![0.0; if want_x { xd.len() } else { 0 }];
        let mut h = vec![0.0; d * d];
        let mut centered = vec![0.0; s * d];
        let mut hc = vec![0.0; s * d];
        for bi in 0..batch {
            let xb = &xd[bi * s * d..(bi + 1) * s * d];
            for ri in 0..r {
                let row = bi * r + ri;
                let prow = &pd[row * s..(row + 1) * s];
                let gm = &g[row * d * d..(row + 1) * d * d];
                for i in 0..d {
                    for j in 0..d {
                        h[i * d + j] = gm[i * d + j] + gm[j * d + i];
                    }
                }
                let mean = &xbar[row * d..(row + 1) * d];
                for si in 0..s {
                    for j in 0..d {
                        centered[si * d + j] = xb[si * d + j] - mean[j];
                    }
                }
                gemm(
                    s,
                    d,
                    d,
                    1.0,
                    MatRef::row_major(&centered[..s * d], d),
                    MatRef::row_major(&h, d),
                    0.0,
                    &mut hc[..s * d],
                );
                if want_p {
                    let mhm: f64 = {
                        let hm: Vec<f64> = (0..d)
                            .map(|i| (0..d).map(|j| h[i * d + j] * mean[j]).sum())
                            .collect();
                        hm.iter().zip(mean).map(|(a, b)| a * b).sum()
                    };
                    for si in 0..s {
                        let chc: f64 = (0..d).map(|j| centered[si * d + j] * hc[si * d + j]).sum();
                        dp[row * s + si] = 0.5 * chc - 0.5 * mhm;
                    }
                }
                if want_x {
                    for si in 0..s {
                        let w = prow[si];
                        if w == 0.0 {
                            continue;
                        }
                        let dst = &mut dx[(bi * s + si) * d..(bi * s + si + 1) * d];
                        for j in 0..d {
                            dst[j] += w * hc[si * d + j];
                        }
                    }
                }
            }
        }
        (want_p.then_some(dp), want_x.then_some(dx))
    }
}

/// Number of leading entries up to and including the last nonzero weight.
fn support_len(p: &[f64]) -> usize {
    p.iter().rposition(|&w| w != 0.0).map_or(0, |i| i + 1)
}

fn merge_heads_data(src: &[f64], b: usize, heads: usize, t: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                let from = ((bi * heads + h) * t + ti) * dh;
                let to = (bi * t + ti) * heads * dh + h * dh;
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}
