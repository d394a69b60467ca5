use attnprior_core::attention_prior::*;
use attnprior_core::numdiff::{jacobian, max_rel_err, rel_err};
use attnprior_core::rng::{normal_vec, seeded_rng, Rng};
use attnprior_core::tensor::linalg::{det, spectral_radius};
use attnprior_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

/// Residual map written out directly from the model definition.
fn naive_residuals(wq: &[f64], wk: &[f64], wv: &[f64], d: usize, inclusive: bool, x: &[f64]) -> Vec<f64> {
    let l = x.len() / d;
    let mv = |m: &[f64], v: &[f64]| -> Vec<f64> { (0..d).map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum()).collect() };
    let row = |s: usize| &x[s * d..(s + 1) * d];
    let mut e = x.to_vec();
    for t in 0..l {
        let end = if inclusive { t + 1 } else { t };
        if end == 0 {
            continue;
        }
        let q = mv(wq, row(t));
        let logits: Vec<f64> = (0..end).map(|s| mv(wk, row(s)).iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for s in 0..end {
            let v = mv(wv, row(s));
            for j in 0..d {
                e[t * d + j] -= w[s] / z * v[j];
            }
        }
    }
    e
}

fn random_params(rng: &mut Rng, d: usize, mode: Masking, identity_values: bool) -> AttentionPriorParams {
    let m = |rng: &mut Rng| Tensor::matrix(d, d, normal_vec(rng, d * d, 0.6)).unwrap();
    let wq = m(rng);
    let wk = m(rng);
    let wv = if identity_values { Tensor::eye(d) } else { m(rng) };
    AttentionPriorParams::new(wq, wk, wv, 0.8, mode).unwrap()
}

fn random_seq(rng: &mut Rng, l: usize, d: usize) -> EmbeddingSequence {
    EmbeddingSequence::new(Tensor::matrix(l, d, normal_vec(rng, l * d, 1.0)).unwrap()).unwrap()
}

fn numeric_residuals(p: &AttentionPriorParams, x: &[f64]) -> Vec<f64> {
    naive_residuals(
        p.w_q().data(),
        p.w_k().data(),
        p.w_v().data(),
        p.dim(),
        p.mode() == Masking::Inclusive,
        x,
    )
}

#[test]
fn residuals_match_naive_definition() {
    let mut rng = seeded_rng(1);
    for mode in [Masking::Strict, Masking::Inclusive] {
        let p = random_params(&mut rng, 3, mode, false);
        let x = random_seq(&mut rng, 5, 3);
        let e = residuals(&p, &x).unwrap();
        let want = numeric_residuals(&p, x.tensor().data());
        assert!(max_rel_err(e.data(), &want, 1.0) < 1e-13);
    }
}

#[test]
fn constant_context_has_zero_dispersion() {
    let p = random_params(&mut seeded_rng(2), 2, Masking::Strict, true);
    let x = EmbeddingSequence::from_rows(&[vec![1.5, -0.5], vec![1.5, -0.5], vec![1.5, -0.5], vec![0.3, 0.9]]).unwrap();
    let (mu, s) = context_summary(&p, &x, 3).unwrap();
    assert!((mu[0] - 1.5).abs() < 1e-15 && (mu[1] + 0.5).abs() < 1e-15);
    assert!(s.cov.iter().all(|v| v.abs() < 1e-15));
    assert_eq!(s.alpha.len(), 3);
}

#[test]
fn first_position_under_strict_masking_is_identity() {
    let p = random_params(&mut seeded_rng(3), 3, Masking::Strict, false);
    let x = random_seq(&mut seeded_rng(4), 4, 3);
    let (mu, s) = context_summary(&p, &x, 0).unwrap();
    assert_eq!(mu, vec![0.0; 3]);
    assert!(s.alpha.is_empty());
    assert_eq!(s.diag_block, Tensor::eye(3).into_data());
    assert!(matches!(context_summary(&p, &x, 4), Err(attnprior_core::Error::Index { .. })));
}

#[test]
fn stats_invariants_and_covariance_identity() {
    let mut rng = seeded_rng(5);
    for _ in 0..50 {
        let d = rng.random_range(1..=3);
        let l = rng.random_range(2..=6);
        let mode = if rng.random_bool(0.5) { Masking::Strict } else { Masking::Inclusive };
        let p = random_params(&mut rng, d, mode, false);
        let x = random_seq(&mut rng, l, d);
        for s in all_stats(&p, &x).unwrap().into_iter().filter(|s| !s.alpha.is_empty()) {
            assert!((s.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.alpha.iter().all(|&a| a >= 0.0));
            // Σ α v vᵀ - v̄ v̄ᵀ from raw values.
            let v = p.w_v().matmul(&x.tensor().transpose()).unwrap().transpose();
            for i in 0..d {
                for j in 0..d {
                    let second: f64 = s.alpha.iter().enumerate().map(|(k, a)| a * v.at(k, i) * v.at(k, j)).sum();
                    let want = second - s.v_bar[i] * s.v_bar[j];
                    assert!((s.cov[i * d + j] - want).abs() < 1e-10);
                    assert!((s.cov[i * d + j] - s.cov[j * d + i]).abs() < 1e-10);
                }
            }
            let eig = nalgebra::DMatrix::from_row_slice(d, d, &s.cov).symmetric_eigenvalues();
            assert!(eig.iter().all(|&e| e > -1e-10));
        }
    }
}

#[test]
fn cross_covariance_reduces_to_cov_times_coupling_for_identity_values() {
    let mut rng = seeded_rng(6);
    for _ in 0..50 {
        let d = rng.random_range(1..=4);
        let p = random_params(&mut rng, d, Masking::Strict, true);
        let x = random_seq(&mut rng, 5, d);
        for s in all_stats(&p, &x).unwrap() {
            let lhs = attnprior_core::tensor::linalg::matmul_sq(&s.cross_cov, p.w_q().data(), d);
            let rhs = s.cov_times_coupling(&p);
            assert!(lhs.iter().zip(&rhs).all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }
}

#[test]
fn coupling_cache_tracks_setters() {
    let mut rng = seeded_rng(7);
    let mut p = random_params(&mut rng, 3, Masking::Strict, true);
    assert!(p.coupling_cache_consistent());
    p.set_w_q(Tensor::matrix(3, 3, normal_vec(&mut rng, 9, 1.0)).unwrap()).unwrap();
    assert!(p.coupling_cache_consistent());
    let want = p.w_k().transpose().matmul(p.w_q()).unwrap();
    assert_eq!(p.coupling(), &want);
    p.set_w_k(Tensor::eye(3)).unwrap();
    assert_eq!(p.coupling(), p.w_q());
    p.corrupt_coupling_cache(0.5);
    assert!(!p.coupling_cache_consistent());
    assert!(AttentionPriorParams::scalar(0.1, 0.0, Masking::Strict).is_err());
}

#[test]
fn scalar_derivative_examples() {
    assert_eq!(scalar_diag_derivative(0.7, &[0.3, 0.7], &[2.0, 2.0]), 1.0);
    // α = (1/2, 1/2), v = ±√5 gives Var = 5.
    let v = 5f64.sqrt();
    assert!(scalar_diag_derivative(0.2, &[0.5, 0.5], &[-v, v]).abs() < 1e-15);
}

#[test]
fn scalar_derivative_matches_finite_difference_through_softmax() {
    let mut rng = seeded_rng(8);
    for _ in 0..200 {
        let a: f64 = rng.random_range(-1.0..1.0);
        let l = rng.random_range(2..=6);
        let vals = normal_vec(&mut rng, l, 1.5);
        let p = AttentionPriorParams::scalar(a, 1.0, Masking::Strict).unwrap();
        let x = EmbeddingSequence::scalars(&vals).unwrap();
        let (_, s) = context_summary(&p, &x, l - 1).unwrap();
        let analytic = scalar_diag_derivative(a, &s.alpha, &vals[..l - 1]);
        let fd = jacobian(
            |xs| vec![naive_residuals(&[a], &[1.0], &[1.0], 1, false, xs)[l - 1]],
            &vals,
            Some(&[l - 1]),
        )[0][0];
        assert!(rel_err(analytic, fd, 1e-12) <= 1e-7, "a={a} analytic={analytic} fd={fd}");
        assert!((s.diag_block[0] - analytic).abs() < 1e-14);
    }
}

fn numeric_block(p: &AttentionPriorParams, x: &EmbeddingSequence, t: usize) -> Vec<f64> {
    let d = p.dim();
    let cols: Vec<usize> = (t * d..(t + 1) * d).collect();
    let j = jacobian(|xs| numeric_residuals(p, xs)[t * d..(t + 1) * d].to_vec(), x.tensor().data(), Some(&cols));
    j.concat()
}

#[test]
fn diag_block_matches_numerical_jacobian() {
    let mut rng = seeded_rng(9);
    for mode in [Masking::Strict, Masking::Inclusive] {
        for identity_values in [true, false] {
            for _ in 0..10 {
                let p = random_params(&mut rng, 3, mode, identity_values);
                let x = random_seq(&mut rng, 4, 3);
                for t in 0..4 {
                    let analytic = diag_jacobian_block(&p, &x, t).unwrap();
                    let fd = numeric_block(&p, &x, t);
                    let err = max_rel_err(analytic.data(), &fd, 1e-3);
                    assert!(err <= 1e-6, "{mode:?} t={t} err={err}");
                }
            }
        }
    }
}

#[test]
fn zero_query_gives_identity_block() {
    let mut p = random_params(&mut seeded_rng(10), 3, Masking::Strict, false);
    p.set_w_q(Tensor::zeros(&[3, 3])).unwrap();
    let x = random_seq(&mut seeded_rng(11), 5, 3);
    for t in 0..5 {
        assert_eq!(diag_jacobian_block(&p, &x, t).unwrap(), Tensor::eye(3));
    }
}

#[test]
fn inclusive_scalar_query_path_block() {
    let a = 0.3;
    let p = AttentionPriorParams::scalar(a, 1.0, Masking::Inclusive).unwrap();
    let x = EmbeddingSequence::scalars(&[0.4, -1.0, 2.0]).unwrap();
    let (_, s) = context_summary(&p, &x, 2).unwrap();
    let var = weighted_variance(&s.alpha, &[0.4, -1.0, 2.0]);
    let qp = inclusive_query_path_block(&s, &p)[0];
    assert!((qp - ((1.0 - s.alpha_tt) - var * a)).abs() < 1e-14);
    // The full block also carries the self-key path α_tt (x_t - v̄) q_t.
    let self_key = s.alpha_tt * (2.0 - s.v_bar[0]) * a * 2.0;
    assert!((s.diag_block[0] - (qp - self_key)).abs() < 1e-14);
}

#[test]
fn inclusive_block_with_zero_self_weight_is_strict_block() {
    let mut rng = seeded_rng(12);
    for _ in 0..20 {
        let p = random_params(&mut rng, 3, Masking::Strict, false);
        let x = random_seq(&mut rng, 4, 3);
        let (_, s) = context_summary(&p, &x, 3).unwrap();
        let q = normal_vec(&mut rng, 3, 1.0);
        let dev = normal_vec(&mut rng, 3, 1.0);
        let inc = inclusive_block_from_parts(&p, &s.cross_cov, 0.0, &dev, &q);
        assert_eq!(inc, s.diag_block);
        assert_eq!(inc, strict_block_from_parts(&p, &s.cross_cov));
    }
}

#[test]
fn margin_examples() {
    let p = AttentionPriorParams::scalar(-0.25, 1.0, Masking::Strict).unwrap();
    let flat = EmbeddingSequence::scalars(&[1.0, 1.0, 0.0]).unwrap();
    assert_eq!(margin(&p, &flat, 2, MarginKind::Det).unwrap(), 1.0);
    assert_eq!(margin(&p, &flat, 2, MarginKind::Spectral).unwrap(), 1.0);
    // x_3 = 0 makes the query zero, so the weights are uniform over {-1, 1}.
    let x = EmbeddingSequence::scalars(&[-1.0, 1.0, 0.0]).unwrap();
    let (_, s) = context_summary(&p, &x, 2).unwrap();
    assert!((s.cov[0] - 1.0).abs() < 1e-15);
    assert!((margin(&p, &x, 2, MarginKind::Det).unwrap() - 1.25).abs() < 1e-15);
    assert!((margin(&p, &x, 2, MarginKind::Spectral).unwrap() - 0.75).abs() < 1e-15);
}

#[test]
fn spectral_margin_implies_det_margin() {
    let mut rng = seeded_rng(13);
    for _ in 0..2000 {
        let d = rng.random_range(1..=4);
        let b = normal_vec(&mut rng, d * d, 1.0);
        let mut sigma = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                sigma[i * d + j] = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum();
            }
        }
        let scale = rng.random_range(0.05..1.0);
        let a = normal_vec(&mut rng, d * d, scale);
        let sa = attnprior_core::tensor::linalg::matmul_sq(&sigma, &a, d);
        let mut block: Vec<f64> = sa.iter().map(|v| -v).collect();
        for i in 0..d {
            block[i * d + i] += 1.0;
        }
        if 1.0 - spectral_radius(&sa, d) > 0.0 {
            assert!(det(&block, d) > 0.0);
        }
    }
}

#[test]
fn support_tokens() {
    let zero = AttentionPriorParams::scalar(0.0, 1.0, Masking::Strict).unwrap();
    let x = EmbeddingSequence::scalars(&[0.3, -1.0, 2.0, 0.5]).unwrap();
    let (m, support) = sequence_margin_and_support(&zero, &x, MarginKind::Det).unwrap();
    assert_eq!((m, support), (1.0, vec![0, 1, 2, 3]));

    // One position sees a widely spread context; all others see a tight one.
    let p = AttentionPriorParams::scalar(0.1, 1.0, Masking::Strict).unwrap();
    let x = EmbeddingSequence::scalars(&[0.0, 0.05, 0.0, 6.0, 0.0, 0.02]).unwrap();
    let margins: Vec<f64> = (0..6).map(|t| margin(&p, &x, t, MarginKind::Det).unwrap()).collect();
    let argmin = (0..6).min_by(|&i, &j| margins[i].total_cmp(&margins[j])).unwrap();
    let (_, support) = sequence_margin_and_support(&p, &x, MarginKind::Det).unwrap();
    assert_eq!(support, vec![argmin]);
    assert!(argmin >= 4);
}

#[test]
fn zero_coupling_density_is_gaussian_in_residuals() {
    let mut rng = seeded_rng(14);
    let mut p = random_params(&mut rng, 2, Masking::Strict, true);
    p.set_w_q(Tensor::zeros(&[2, 2])).unwrap();
    let p = AttentionPriorParams::new(p.w_q().clone(), p.w_k().clone(), p.w_v().clone(), 1.0, Masking::Strict).unwrap();
    let x = random_seq(&mut rng, 5, 2);
    let r = log_density(&p, &x).unwrap();
    assert!(r.logdet_terms.iter().all(|&v| v == 0.0));
    let e = numeric_residuals(&p, x.tensor().data());
    let want: f64 = e.iter().map(|v| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln()).sum();
    assert!((r.total_log_density - want).abs() < 1e-12);
    assert_eq!(r.sequence_margin, 1.0);
}

#[test]
fn density_report_recomposes_from_parts() {
    let mut rng = seeded_rng(15);
    for _ in 0..20 {
        let p = random_params(&mut rng, 2, Masking::Strict, false);
        let x = random_seq(&mut rng, 4, 2);
        let r = log_density(&p, &x).unwrap();
        if !r.valid {
            assert_eq!(r.total_log_density, f64::NEG_INFINITY);
            continue;
        }
        let recomposed = -r.quad_energy + r.logdet_terms.iter().sum::<f64>() + DensityReport::normalizer(4, 2, p.sigma());
        assert!((r.total_log_density - recomposed).abs() < 1e-12);
        let min = r.margins.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(r.support_tokens.iter().all(|&t| r.margins[t] - min <= 1e-9));
    }
}

#[test]
fn degenerate_configuration_is_flagged() {
    // α = (1/2, 1/2) over {-2, 2} gives Var = 4 = 1/a.
    let p = AttentionPriorParams::scalar(0.25, 1.0, Masking::Strict).unwrap();
    let x = EmbeddingSequence::scalars(&[-2.0, 2.0, 0.0]).unwrap();
    let r = log_density(&p, &x).unwrap();
    assert!(!r.valid);
    assert_eq!(r.total_log_density, f64::NEG_INFINITY);
    assert_eq!(r.logdet_terms[2], f64::NEG_INFINITY);
    assert_eq!(r.support_tokens, vec![2]);
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"total_log_density\":\"-inf\""));
}

#[test]
fn full_jacobian_determinant_factorizes() {
    let mut rng = seeded_rng(16);
    for _ in 0..10 {
        let d = rng.random_range(1..=3);
        let l = rng.random_range(2..=5);
        let p = random_params(&mut rng, d, Masking::Strict, false);
        let x = random_seq(&mut rng, l, d);
        let full = jacobian(|xs| numeric_residuals(&p, xs), x.tensor().data(), None).concat();
        let dense = det(&full, l * d);
        let product: f64 = all_stats(&p, &x).unwrap().iter().map(|s| s.det).product();
        assert!(rel_err(dense, product, 1e-12) < 1e-5, "{dense} vs {product}");
    }
}

#[test]
fn future_positions_do_not_move_past_residuals() {
    let mut rng = seeded_rng(17);
    let p = random_params(&mut rng, 2, Masking::Strict, false);
    let x = random_seq(&mut rng, 5, 2);
    let e0 = residuals(&p, &x).unwrap();
    let mut moved = x.tensor().clone();
    moved.data_mut()[4 * 2] += 3.0;
    moved.data_mut()[3 * 2 + 1] -= 1.0;
    let e1 = residuals(&p, &EmbeddingSequence::new(moved).unwrap()).unwrap();
    assert_eq!(&e0.data()[..6], &e1.data()[..6]);
}

fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    (0..n).map(|i| if i == 0 || i == n - 1 { h / 2.0 } else { h }).collect()
}

#[test]
fn density_integrates_to_one() {
    let p = AttentionPriorParams::scalar(-0.25, 1.0, Masking::Strict).unwrap();
    let n = 81;
    let h = 20.0 / (n - 1) as f64;
    let w = trapezoid_weights(n, h);
    let grid: Vec<f64> = (0..n).map(|i| -10.0 + h * i as f64).collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let x = EmbeddingSequence::scalars(&[grid[i], grid[j], grid[k]]).unwrap();
                total += w[i] * w[j] * w[k] * log_density(&p, &x).unwrap().total_log_density.exp();
            }
        }
    }
    assert!((total - 1.0).abs() < 0.01, "{total}");
}

#[test]
fn penalty_examples() {
    let mut g = Graph::new();
    let w = g.param(Tensor::zeros(&[2, 2]));
    let x = g.constant(Tensor::matrix(3, 2, vec![0.1, 0.2, -1.0, 0.5, 2.0, 0.0]).unwrap());
    let out = margin_penalty(&mut g, w, x, Reduction::Sum).unwrap();
    assert_eq!(g.value(out.value).item(), 0.0);

    let mut g = Graph::new();
    let w = g.param(Tensor::matrix(1, 1, vec![0.5]).unwrap());
    let x = g.constant(Tensor::matrix(3, 1, vec![-1.0, 1.0, 0.0]).unwrap());
    let out = margin_penalty(&mut g, w, x, Reduction::Sum).unwrap();
    assert!((g.value(out.value).item() - 2f64.ln()).abs() < 1e-15);
    assert_eq!((out.saturated, out.positions), (0, 2));
}

#[test]
fn penalty_agrees_with_density_logdets() {
    let mut rng = seeded_rng(18);
    for _ in 0..10 {
        let d = 3;
        let w = Tensor::matrix(d, d, normal_vec(&mut rng, d * d, 0.3)).unwrap();
        let x = Tensor::matrix(6, d, normal_vec(&mut rng, 6 * d, 1.0)).unwrap();
        let params = AttentionPriorParams::from_bilinear(&w, 1.0, Masking::Strict).unwrap();
        let report = log_density(&params, &EmbeddingSequence::new(x.clone()).unwrap()).unwrap();
        let mut g = Graph::new();
        let wv = g.param(w);
        let xv = g.param(x);
        let out = margin_penalty(&mut g, wv, xv, Reduction::Sum).unwrap();
        if report.valid {
            let want = -report.logdet_terms.iter().sum::<f64>();
            assert!((g.value(out.value).item() - want).abs() < 1e-10);
        }
    }
}

#[test]
fn penalty_gradient_matches_finite_differences() {
    let mut rng = seeded_rng(19);
    let (b, t, d) = (2, 5, 3);
    let w0 = normal_vec(&mut rng, d * d, 0.3);
    let x0 = normal_vec(&mut rng, b * t * d, 1.0);
    let eval = |wd: &[f64], xd: &[f64]| {
        let mut g = Graph::new();
        let w = g.param(Tensor::matrix(d, d, wd.to_vec()).unwrap());
        let x = g.param(Tensor::new(vec![b, t, d], xd.to_vec()).unwrap());
        let out = margin_penalty(&mut g, w, x, Reduction::Mean).unwrap();
        (g, w, x, out.value)
    };
    let (g, w, x, v) = eval(&w0, &x0);
    let grads = g.backward(v).unwrap();
    let fd_w = attnprior_core::numdiff::gradient(|wd| eval(wd, &x0).0.value(eval(wd, &x0).3).item(), &w0);
    let fd_x = attnprior_core::numdiff::gradient(|xd| eval(&w0, xd).0.value(eval(&w0, xd).3).item(), &x0);
    assert!(max_rel_err(grads.wrt(w).data(), &fd_w, 1e-6) < 1e-4);
    assert!(max_rel_err(grads.wrt(x).data(), &fd_x, 1e-6) < 1e-4);
}

#[test]
fn residual_energy_matches_report() {
    let mut rng = seeded_rng(20);
    let d = 2;
    let w = Tensor::matrix(d, d, normal_vec(&mut rng, d * d, 0.3)).unwrap();
    let x = Tensor::matrix(5, d, normal_vec(&mut rng, 5 * d, 1.0)).unwrap();
    let params = AttentionPriorParams::from_bilinear(&w, 0.7, Masking::Strict).unwrap();
    let report = log_density(&params, &EmbeddingSequence::new(x.clone()).unwrap()).unwrap();
    let mut g = Graph::new();
    let wv = g.constant(w);
    let xv = g.constant(x);
    let e = residual_energy(&mut g, wv, xv, 0.7, Reduction::Sum).unwrap();
    assert!((g.value(e).item() - report.quad_energy).abs() < 1e-12);
}

#[test]
fn figure2_curves() {
    let table = figure2_sweep(&Figure2Config::default()).unwrap();
    let (at, gauss) = table.peak(0.0).unwrap();
    assert!((gauss - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    assert!((at - 1.0).abs() < 1e-9);
    let deg = table.degeneracy_var(0.25).unwrap();
    assert!((deg - 4.0).abs() <= 0.01 + 1e-12);
    assert!(table.degeneracy_var(-0.25).is_none());
    let neg: Vec<f64> = [-0.55, -0.35, -0.25].iter().map(|&a| table.peak(a).unwrap().1).collect();
    assert!(neg.windows(2).all(|w| w[0] > w[1]) && neg[2] > gauss, "{neg:?}");
    for a in [0.25, 0.35, 0.55] {
        assert!(table.peak(a).unwrap().1 < gauss);
    }
}

#[test]
fn figure3_population_counts() {
    let cfg = Figure3Config::default();
    let neg = figure3_population(&cfg, -0.2, 0).unwrap();
    assert_eq!(neg.valid_count, 4000);
    assert!(neg.rows.iter().all(|r| r.factor >= 1.0));
    let pos = figure3_population(&cfg, 0.2, 0).unwrap();
    let frac = pos.valid_count as f64 / 4000.0;
    assert!((frac - 3387.0 / 4000.0).abs() <= 0.02, "{}", pos.valid_count);
    for r in pos.rows.iter().filter(|r| r.valid) {
        assert!((r.factor - (1.0 - 0.2 * r.var)).abs() <= 1e-10);
    }
    let again = figure3_population(&cfg, 0.2, 0).unwrap();
    assert_eq!(again.valid_count, pos.valid_count);
}

proptest! {
    #[test]
    fn sign_dichotomy(a in -2.0f64..2.0, xs in prop::collection::vec(-5.0f64..5.0, 2..6)) {
        let p = AttentionPriorParams::scalar(a, 1.0, Masking::Strict).unwrap();
        let x = EmbeddingSequence::scalars(&xs).unwrap();
        for s in all_stats(&p, &x).unwrap() {
            let f = s.diag_block[0];
            if a < 0.0 {
                prop_assert!(f >= 1.0 - checks::ROUNDING_TOL, "{f}");
            }
            let var = s.cov[0];
            prop_assert!((f - (1.0 - a * var)).abs() <= 1e-12 * (1.0 + a.abs() * var));
            if a > 0.0 && f.abs() > checks::ROUNDING_TOL {
                prop_assert_eq!(f > 0.0, var < 1.0 / a);
            }
        }
    }
}

#[test]
fn invariant_suite_passes() {
    let reports = checks::run_checks(0).unwrap();
    assert_eq!(reports.len(), 10);
    for r in reports {
        assert!(r.pass, "{r:?}");
    }
}

