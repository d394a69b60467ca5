//! Small dense linear algebra on row-major `n x n` slices.

/// Determinants with smaller magnitude are treated as singular.
pub const DET_FLOOR: f64 = 1e-12;

/// Partial-pivoting LU factorization `P a = L U`, stored packed.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
    singular: bool,
}

impl Lu {
    pub fn new(a: &[f64], n: usize) -> Self {
        assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let mut singular = false;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in k + 1..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 {
                singular = true;
                continue;
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Lu {
            n,
            lu,
            perm,
            sign,
            singular,
        }
    }

    pub fn det(&self) -> f64 {
        if self.singular {
            return 0.0;
        }
        let diag: f64 = (0..self.n).map(|i| self.lu[i * self.n + i]).product();
        self.sign * diag
    }

    /// `(sign, log|det|)`, with `(0, -inf)` for an exactly singular matrix.
    pub fn sign_logabsdet(&self) -> (f64, f64) {
        if self.singular {
            return (0.0, f64::NEG_INFINITY);
        }
        let mut sign = self.sign;
        let mut log = 0.0;
        for i in 0..self.n {
            let u = self.lu[i * self.n + i];
            if u < 0.0 {
                sign = -sign;
            }
            log += u.abs().ln();
        }
        (sign, log)
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    /// Solves `a x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        b.copy_from_slice(&x);
    }

    pub fn inverse(&self) -> Option<Vec<f64>> {
        if self.singular {
            return None;
        }
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[i * n + p] = 1.0;
        }
        // Row operations on whole rows of the permuted identity.
        for i in 1..n {
            let (done, rest) = inv.split_at_mut(i * n);
            let row = &mut rest[..n];
            for j in 0..i {
                let f = self.lu[i * n + j];
                if f != 0.0 {
                    for (r, s) in row.iter_mut().zip(&done[j * n..(j + 1) * n]) {
                        *r -= f * s;
                    }
                }
            }
        }
        for i in (0..n).rev() {
            let (head, tail) = inv.split_at_mut((i + 1) * n);
            let row = &mut head[i * n..];
            for j in i + 1..n {
                let f = self.lu[i * n + j];
                if f != 0.0 {
                    for (r, s) in row.iter_mut().zip(&tail[(j - i - 1) * n..(j - i) * n]) {
                        *r -= f * s;
                    }
                }
            }
            let pivot = self.lu[i * n + i];
            row.iter_mut().for_each(|v| *v /= pivot);
        }
        Some(inv)
    }
}

pub fn det(a: &[f64], n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => a[0],
        2 => a[0] * a[3] - a[1] * a[2],
        _ => Lu::new(a, n).det(),
    }
}

pub fn sign_logabsdet(a: &[f64], n: usize) -> (f64, f64) {
    Lu::new(a, n).sign_logabsdet()
}

pub fn inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    Lu::new(a, n).inverse()
}

/// Row-major `n x n` product.
pub fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

pub fn matvec(a: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum())
        .collect()
}

/// Largest singular value, from the eigenvalues of `aᵀa` by power iteration.
pub fn operator_norm(a: &[f64], n: usize) -> f64 {
    let mut ata = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            ata[i * n + j] = (0..n).map(|k| a[k * n + i] * a[k * n + j]).sum();
        }
    }
    spectral_radius(&ata, n).sqrt()
}

const POWER_ITERS: usize = 200;
const POWER_TOL: f64 = 1e-10;

/// Spectral radius of a general real matrix.
///
/// Power iteration on the matrix itself: `M^(2^j)` is formed by repeated
/// squaring with renormalization, and `‖M^k‖^(1/k)` converges to the spectral
/// radius whether the dominant eigenvalues are real, complex, or tied in
/// modulus. Stops after 200 squarings or when the estimate moves by less
/// than 1e-10 relative.
pub fn spectral_radius(m: &[f64], n: usize) -> f64 {
    assert_eq!(m.len(), n * n);
    match n {
        0 => return 0.0,
        1 => return m[0].abs(),
        _ => {}
    }
    let fro = |a: &[f64]| a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n0 = fro(m);
    if n0 == 0.0 || !n0.is_finite() {
        return if n0 == 0.0 { 0.0 } else { f64::NAN };
    }
    let mut b: Vec<f64> = m.iter().map(|v| v / n0).collect();
    // log ‖M^k‖ with k = 2^j, tracked as `log_norm / k`.
    let mut log_rate = n0.ln();
    let mut prev_rate = log_rate;
    for j in 1..=POWER_ITERS {
        let sq = matmul_sq(&b, &b, n);
        let ns = fro(&sq);
        if ns == 0.0 {
            return 0.0;
        }
        log_rate += ns.ln() / (1u64 << j.min(63)) as f64;
        b = sq.into_iter().map(|v| v / ns).collect();
        // The error in `log_rate` halves with every squaring, so one
        // Richardson step removes its leading term.
        if (log_rate - prev_rate).abs() <= POWER_TOL {
            return (2.0 * log_rate - prev_rate).exp();
        }
        prev_rate = log_rate;
    }
    log_rate.exp()
}
