//! Executable invariant checks: analytic Jacobian quantities against finite
//! differences of the residual map, and the algebraic identities behind them.

use rand::Rng as _;

use super::{all_stats, residuals, scalar_diag_derivative, AttentionPriorParams, EmbeddingSequence, Masking};
use crate::error::Result;
use crate::numdiff::{jacobian, max_rel_err, rel_err};
use crate::report::CheckReport;
use crate::rng::{derived_rng, normal_vec, Rng};
use crate::tensor::linalg::{det, matmul_sq, spectral_radius};
use crate::tensor::Tensor;

pub const SCALAR_TOL: f64 = 1e-7;
pub const BLOCK_TOL: f64 = 1e-6;
pub const TRIANGULAR_TOL: f64 = 1e-5;
pub const IDENTITY_TOL: f64 = 1e-10;
pub const SOFTMAX_TOL: f64 = 1e-7;
/// Rounding allowance for the sign-dichotomy bound `factor >= 1`.
pub const ROUNDING_TOL: f64 = 1e-12;

fn seq(rng: &mut Rng, l: usize, d: usize, std: f64) -> Result<EmbeddingSequence> {
    EmbeddingSequence::new(Tensor::matrix(l, d, normal_vec(rng, l * d, std))?)
}

fn random_params(rng: &mut Rng, d: usize, mode: Masking, identity_values: bool) -> Result<AttentionPriorParams> {
    let mut m = || Tensor::matrix(d, d, normal_vec(rng, d * d, 0.6));
    let (wq, wk) = (m()?, m()?);
    let wv = if identity_values { Tensor::eye(d) } else { m()? };
    AttentionPriorParams::new(wq, wk, wv, 1.0, mode)
}

fn flat_residuals(p: &AttentionPriorParams, x: &[f64], l: usize, d: usize) -> Vec<f64> {
    let s = EmbeddingSequence::new(Tensor::matrix(l, d, x.to_vec()).expect("shape")).expect("finite input");
    residuals(p, &s).expect("residuals").into_data()
}

/// `1 - a·Var_t` against the central difference of the scalar residual at
/// the last position, over `n` random `(a, context, x_t)` draws.
pub fn scalar_derivative_check(n: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = derived_rng(seed, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let a = rng.random_range(-1.0..1.0);
        let l = rng.random_range(2..=6);
        let std = rng.random_range(0.3..2.0);
        let x = normal_vec(&mut rng, l, std);
        let p = AttentionPriorParams::scalar(a, 1.0, Masking::Strict)?;
        let stats = all_stats(&p, &EmbeddingSequence::scalars(&x)?)?;
        let last = &stats[l - 1];
        let analytic = scalar_diag_derivative(a, &last.alpha, &x[..l - 1]);
        let numeric = jacobian(|v| vec![flat_residuals(&p, v, l, 1)[l - 1]], &x, Some(&[l - 1]))[0][0];
        worst = worst.max(rel_err(analytic, numeric, 1e-3));
    }
    Ok(CheckReport::within("scalar_diag_derivative_vs_fd", format!("{n} instances"), worst, SCALAR_TOL))
}

/// Analytic diagonal blocks against the numerical Jacobian, alternating
/// strict and inclusive masking with general `W_V`.
pub fn block_check(n: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = derived_rng(seed, 2);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let d = rng.random_range(1..=3);
        let l = rng.random_range(2..=5);
        let mode = if i % 2 == 0 { Masking::Strict } else { Masking::Inclusive };
        let p = random_params(&mut rng, d, mode, false)?;
        let x = seq(&mut rng, l, d, 1.0)?;
        let stats = all_stats(&p, &x)?;
        let flat = x.tensor().data().to_vec();
        for s in &stats {
            let cols: Vec<usize> = (s.t * d..(s.t + 1) * d).collect();
            let j = jacobian(|v| flat_residuals(&p, v, l, d), &flat, Some(&cols));
            let numeric: Vec<f64> = j[s.t * d..(s.t + 1) * d].concat();
            worst = worst.max(max_rel_err(&s.diag_block, &numeric, 1e-3));
        }
    }
    Ok(CheckReport::within("diag_block_vs_numerical_jacobian", format!("{n} instances, d<=3, L<=5"), worst, BLOCK_TOL))
}

/// Determinant of the dense numerical Jacobian against the product of the
/// analytic diagonal-block determinants.
pub fn triangular_check(n: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = derived_rng(seed, 3);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let d = rng.random_range(1..=3);
        let l = rng.random_range(2..=5);
        let mode = if i % 2 == 0 { Masking::Strict } else { Masking::Inclusive };
        let p = random_params(&mut rng, d, mode, false)?;
        let x = seq(&mut rng, l, d, 1.0)?;
        let product: f64 = all_stats(&p, &x)?.iter().map(|s| s.det).product();
        let j = jacobian(|v| flat_residuals(&p, v, l, d), x.tensor().data(), None);
        let dense = det(&j.concat(), l * d);
        worst = worst.max(rel_err(dense, product, 1e-12));
    }
    Ok(CheckReport::within("dense_det_vs_block_product", format!("{n} single-layer instances"), worst, TRIANGULAR_TOL))
}

/// `Σ α (v - v̄)(v - v̄)ᵀ = Σ α v vᵀ - v̄ v̄ᵀ`, the right side computed here
/// from the weights alone.
pub fn covariance_identity_check(n: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = derived_rng(seed, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let d = rng.random_range(1..=4);
        let l = rng.random_range(2..=6);
        let p = random_params(&mut rng, d, Masking::Strict, true)?;
        let x = seq(&mut rng, l, d, 1.5)?;
        for s in all_stats(&p, &x)?.iter().skip(1) {
            let mut second = vec![0.0; d * d];
            let mut mean = vec![0.0; d];
            for (k, &a) in s.alpha.iter().enumerate() {
                let v = x.row(k);
                for i in 0..d {
                    mean[i] += a * v[i];
                    for j in 0..d {
                        second[i * d + j] += a * v[i] * v[j];
                    }
                }
            }
            for i in 0..d {
                for j in 0..d {
                    let rhs = second[i * d + j] - mean[i] * mean[j];
                    worst = worst.max((s.cov[i * d + j] - rhs).abs());
                    worst = worst.max((s.cov[i * d + j] - s.cov[j * d + i]).abs());
                }
            }
        }
    }
    Ok(CheckReport::within("covariance_identity", format!("{n} instances"), worst, IDENTITY_TOL))
}

/// With values equal to embeddings, `CrossCov·W_Q = Σ_t A`.
pub fn cross_cov_reduction_check(n: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = derived_rng(seed, 5);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let d = rng.random_range(1..=4);
        let l = rng.random_range(2..=6);
        let p = random_params(&mut rng, d, Masking::Strict, true)?;
        let x = seq(&mut rng, l, d, 1.0)?;
        for s in all_stats(&p, &x)? {
            let lhs = matmul_sq(&s.cross_cov, p.w_q().data(), d);
            let rhs = s.cov_times_coupling(&p);
            worst = lhs.iter().zip(&rhs).fold(worst, |w, (a, b)| w.max((a - b).abs()));
        }
    }
    Ok(CheckReport::within("cross_cov_equals_sigma_a", format!("{n} instances, W_V = I"), worst, IDENTITY_TOL))
}

/// Counts instances with `ρ(Σ A) < 1` but `det(I - Σ A) = 0`, over random
/// PSD `Σ` and arbitrary `A`.
pub fn spectral_sufficiency_check(n: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = derived_rng(seed, 6);
    let mut violations = 0usize;
    for _ in 0..n {
        let d = rng.random_range(1..=4);
        let scale = rng.random_range(0.05..1.5);
        let b = normal_vec(&mut rng, d * d, scale);
        let sigma: Vec<f64> = (0..d * d)
            .map(|ij| {
                let (i, j) = (ij / d, ij % d);
                (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum()
            })
            .collect();
        let a = normal_vec(&mut rng, d * d, 1.0);
        let sa = matmul_sq(&sigma, &a, d);
        let mut block: Vec<f64> = sa.iter().map(|v| -v).collect();
        for i in 0..d {
            block[i * d + i] += 1.0;
        }
        if spectral_radius(&sa, d) < 1.0 && det(&block, d) == 0.0 {
            violations += 1;
        }
    }
    Ok(CheckReport::within("spectral_sufficiency_violations", format!("{n} instances, d<=4"), violations as f64, 0.0))
}

/// For `d = 1` and `a < 0` the diagonal factor is at least 1; reports the
/// largest shortfall.
pub fn sign_dichotomy_check(n: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = derived_rng(seed, 7);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let a = -rng.random_range(0.0..2.0);
        let l = rng.random_range(2..=6);
        let x = normal_vec(&mut rng, l, 3.0);
        let p = AttentionPriorParams::scalar(a, 1.0, Masking::Strict)?;
        for s in all_stats(&p, &EmbeddingSequence::scalars(&x)?)? {
            worst = worst.max(1.0 - s.diag_block[0]);
        }
    }
    Ok(CheckReport::within("negative_coupling_factor_at_least_one", format!("{n} instances"), worst.max(0.0), ROUNDING_TOL))
}

/// `∂softmax/∂logits = Diag(α) - ααᵀ` against central differences.
pub fn softmax_jacobian_check(n: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = derived_rng(seed, 8);
    let softmax = |z: &[f64]| -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.random_range(1..=6);
        let z = normal_vec(&mut rng, k, 2.0);
        let alpha = softmax(&z);
        let analytic: Vec<f64> = (0..k * k)
            .map(|ij| {
                let (i, j) = (ij / k, ij % k);
                (if i == j { alpha[i] } else { 0.0 }) - alpha[i] * alpha[j]
            })
            .collect();
        let numeric = jacobian(softmax, &z, None).concat();
        worst = worst.max(max_rel_err(&analytic, &numeric, 1e-3));
    }
    Ok(CheckReport::within("softmax_jacobian", format!("{n} instances"), worst, SOFTMAX_TOL))
}

/// Changing later positions never changes earlier residuals.
pub fn causality_check(n: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = derived_rng(seed, 9);
    let mut changed = 0usize;
    for i in 0..n {
        let d = rng.random_range(1..=3);
        let l = rng.random_range(2..=5);
        let mode = if i % 2 == 0 { Masking::Strict } else { Masking::Inclusive };
        let p = random_params(&mut rng, d, mode, false)?;
        let x = seq(&mut rng, l, d, 1.0)?;
        let cut = rng.random_range(1..l);
        let mut moved = x.tensor().clone();
        for v in &mut moved.data_mut()[cut * d..] {
            *v += rng.random_range(-3.0..3.0);
        }
        let (a, b) = (residuals(&p, &x)?, residuals(&p, &EmbeddingSequence::new(moved)?)?);
        if a.data()[..cut * d] != b.data()[..cut * d] {
            changed += 1;
        }
    }
    Ok(CheckReport::within("earlier_residuals_ignore_future", format!("{n} instances"), changed as f64, 0.0))
}

/// Inclusive block with the self-weight removed equals the strict block.
pub fn inclusive_reduction_check(n: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = derived_rng(seed, 10);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let d = rng.random_range(1..=3);
        let p = random_params(&mut rng, d, Masking::Strict, false)?;
        let cc = normal_vec(&mut rng, d * d, 1.0);
        let (v_dev, q) = (normal_vec(&mut rng, d, 1.0), normal_vec(&mut rng, d, 1.0));
        let strict = super::strict_block_from_parts(&p, &cc);
        let inclusive = super::inclusive_block_from_parts(&p, &cc, 0.0, &v_dev, &q);
        worst = strict.iter().zip(&inclusive).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    Ok(CheckReport::within("inclusive_with_zero_self_weight_is_strict", format!("{n} instances"), worst, 0.0))
}

/// Every check above at its standard instance count.
pub fn run_checks(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        scalar_derivative_check(1000, seed)?,
        block_check(200, seed)?,
        triangular_check(50, seed)?,
        covariance_identity_check(200, seed)?,
        cross_cov_reduction_check(200, seed)?,
        spectral_sufficiency_check(10_000, seed)?,
        sign_dichotomy_check(1000, seed)?,
        softmax_jacobian_check(200, seed)?,
        causality_check(200, seed)?,
        inclusive_reduction_check(200, seed)?,
    ])
}
