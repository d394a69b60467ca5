use attnprior_core::attention_prior::{all_stats, log_density, AttentionPriorParams, EmbeddingSequence, Masking};
use attnprior_core::depth_hierarchy::*;
use attnprior_core::numdiff::{jacobian, rel_err};
use attnprior_core::rng::{normal_vec, seeded_rng, Rng};
use attnprior_core::tensor::linalg::det;
use attnprior_core::Tensor;

fn random_seq(rng: &mut Rng, t: usize, d: usize) -> EmbeddingSequence {
    EmbeddingSequence::new(Tensor::matrix(t, d, normal_vec(rng, t * d, 1.0)).unwrap()).unwrap()
}

fn prior(d: usize, rng: &mut Rng) -> AttentionPriorParams {
    let m = |rng: &mut Rng| Tensor::matrix(d, d, normal_vec(rng, d * d, 0.4)).unwrap();
    AttentionPriorParams::new(m(rng), m(rng), Tensor::eye(d), 1.0, Masking::Strict).unwrap()
}

fn stack(d: usize, heads: usize, blocks: usize, c: Conditioning, seed: u64) -> LayerStack {
    LayerStack::random(d, heads, blocks, 0.7, c, &mut seeded_rng(seed)).unwrap()
}

#[test]
fn residual_vanishes_on_the_noise_free_output() {
    let s = stack(3, 1, 1, Conditioning::PreviousLayer, 1);
    let mut rng = seeded_rng(2);
    let x_prev = random_seq(&mut rng, 4, 3);
    let g = EmbeddingSequence::new(s.layer_map(2, &x_prev, &x_prev).unwrap()).unwrap();
    for t in 0..4 {
        assert!(layer_residual(&s, 2, &x_prev, &g, t).unwrap().iter().all(|&v| v == 0.0));
    }
    assert!(matches!(
        layer_residual(&s, 2, &x_prev, &g, 4),
        Err(attnprior_core::Error::Index { .. })
    ));
    assert!(layer_residual(&s, 3, &x_prev, &g, 0).is_err());
    assert!(layer_residual(&s, 1, &x_prev, &g, 0).is_err());
}

#[test]
fn residual_is_causal_and_reproducible() {
    let s = stack(2, 2, 1, Conditioning::PreviousLayer, 3);
    let mut rng = seeded_rng(4);
    let x_prev = random_seq(&mut rng, 4, 2);
    let x_curr = random_seq(&mut rng, 4, 2);
    let mut later = x_prev.tensor().clone();
    later.set(3, 0, later.at(3, 0) + 5.0);
    later.set(2, 1, later.at(2, 1) - 1.0);
    let later = EmbeddingSequence::new(later).unwrap();
    for t in 0..2 {
        let a = layer_residual(&s, 2, &x_prev, &x_curr, t).unwrap();
        assert_eq!(a, layer_residual(&s, 2, &later, &x_curr, t).unwrap());
        // Independent re-execution of the block.
        let fresh = s.clone();
        assert_eq!(a, layer_residual(&fresh, 2, &x_prev, &x_curr, t).unwrap());
    }
}

#[test]
fn previous_layer_blocks_are_identity() {
    let mut rng = seeded_rng(5);
    for (d, heads) in [(2, 1), (2, 2), (3, 1), (3, 3)] {
        let s = stack(d, heads, 2, Conditioning::PreviousLayer, 6 + d as u64);
        let layers: Vec<_> = (0..3).map(|_| random_seq(&mut rng, 4, d)).collect();
        for layer in 2..=3 {
            for t in 0..4 {
                let b = deep_diag_block(&s, layer, t, &layers[layer - 2], &layers[layer - 1]).unwrap();
                assert_eq!(b.analytic, Some(Tensor::eye(d)));
                assert!(b.numerical.max_abs_diff(&Tensor::eye(d)) <= IDENTITY_TOL, "{:?}", b.numerical);
            }
        }
    }
}

#[test]
fn self_referential_stub_is_not_identity() {
    let s = stack(2, 1, 1, Conditioning::SelfReferentialStub, 7);
    let mut rng = seeded_rng(8);
    let (a, b) = (random_seq(&mut rng, 3, 2), random_seq(&mut rng, 3, 2));
    let block = deep_diag_block(&s, 2, 2, &a, &b).unwrap();
    assert!(block.analytic.is_none());
    assert!(block.deviation > STUB_MIN_DEVIATION, "{}", block.deviation);
    let report = deep_log_density(&s, &prior(2, &mut rng), &a, &[b]).unwrap();
    assert!(!report.deeper_logdets_vanish());
}

#[test]
fn single_stage_density_is_the_prior() {
    let mut rng = seeded_rng(9);
    let p = prior(2, &mut rng);
    let s = stack(2, 1, 0, Conditioning::PreviousLayer, 10);
    let x0 = random_seq(&mut rng, 4, 2);
    let r = deep_log_density(&s, &p, &x0, &[]).unwrap();
    assert_eq!(r.total, log_density(&p, &x0).unwrap().total_log_density);
}

#[test]
fn deeper_layers_add_no_logdet() {
    let mut rng = seeded_rng(11);
    let p = prior(2, &mut rng);
    let s = stack(2, 1, 1, Conditioning::PreviousLayer, 12);
    let x0 = random_seq(&mut rng, 3, 2);
    let x1 = random_seq(&mut rng, 3, 2);
    let r = deep_log_density(&s, &p, &x0, &[x1]).unwrap();
    assert!(r.deeper_logdets_vanish());
    assert_eq!(r.total_logdet(), log_density(&p, &x0).unwrap().logdet_terms.iter().sum::<f64>());
}

/// Flattened residuals of both layers, ordered by (layer, position, coordinate).
fn flat_residuals(s: &LayerStack, p: &AttentionPriorParams, x: &[f64], t: usize, d: usize) -> Vec<f64> {
    let n = t * d;
    let x0 = EmbeddingSequence::new(Tensor::matrix(t, d, x[..n].to_vec()).unwrap()).unwrap();
    let upper: Vec<_> = x[n..]
        .chunks(n)
        .map(|c| EmbeddingSequence::new(Tensor::matrix(t, d, c.to_vec()).unwrap()).unwrap())
        .collect();
    deep_residuals(s, p, &x0, &upper).unwrap().into_iter().flat_map(|r| r.into_data()).collect()
}

#[test]
fn dense_jacobian_is_lexicographically_triangular() {
    let (t, d) = (3, 2);
    let n = t * d;
    for seed in 0..5 {
        let mut rng = seeded_rng(100 + seed);
        let p = prior(d, &mut rng);
        let s = stack(d, 2, 1, Conditioning::PreviousLayer, 200 + seed);
        let x = normal_vec(&mut rng, 2 * n, 1.0);
        let j = jacobian(|v| flat_residuals(&s, &p, v, t, d), &x, None);
        let idx = |layer: usize, pos: usize| layer * n + pos * d;
        for (lr, tr) in (0..2).flat_map(|l| (0..t).map(move |p| (l, p))) {
            for (lc, tc) in (0..2).flat_map(|l| (0..t).map(move |p| (l, p))) {
                let later = (lc, tc) > (lr, tr);
                let same_upper = lc == lr && lr > 0 && tc != tr;
                if later || same_upper {
                    for i in 0..d {
                        for k in 0..d {
                            assert!(j[idx(lr, tr) + i][idx(lc, tc) + k].abs() < 1e-9);
                        }
                    }
                }
            }
        }
        let dense = det(&j.concat(), 2 * n);
        let product: f64 = all_stats(&p, &EmbeddingSequence::new(Tensor::matrix(t, d, x[..n].to_vec()).unwrap()).unwrap())
            .unwrap()
            .iter()
            .map(|s| s.det)
            .product();
        assert!(rel_err(dense, product, 1e-12) <= 1e-5, "{dense} vs {product}");
    }
}

#[test]
fn additive_noise_round_trip() {
    let mut rng = seeded_rng(13);
    let p = prior(3, &mut rng);
    let s = LayerStack::random(3, 1, 2, 0.5, Conditioning::PreviousLayer, &mut rng).unwrap();
    let x0 = random_seq(&mut rng, 4, 3);
    let (upper, noises) = sample_upper_layers(&s, &x0, &mut rng).unwrap();
    let r = deep_log_density(&s, &p, &x0, &upper).unwrap();
    let log_n = |v: f64, sigma: f64| -0.5 * (v / sigma).powi(2) - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let noise_term: f64 = noises.iter().flat_map(|n| n.data().iter().map(|&v| log_n(v, 0.5))).sum();
    let want = log_density(&p, &x0).unwrap().total_log_density + noise_term;
    assert!((r.total - want).abs() < 1e-10, "{} vs {want}", r.total);
}

#[test]
fn module_checks_pass() {
    for r in run_checks(0).unwrap() {
        assert!(r.pass, "{r:?}");
    }
}
