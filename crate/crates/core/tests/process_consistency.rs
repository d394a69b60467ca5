use attnprior_core::attention_prior::{log_density, solve_position, AttentionPriorParams, EmbeddingSequence, Masking};
use attnprior_core::process_consistency::*;
use attnprior_core::rng::{derived_rng, normal_vec, seeded_rng};
use attnprior_core::Tensor;
use proptest::prelude::*;

fn causal_spec(k: usize, seed: u64) -> TokenModelSpec {
    TokenModelSpec::random(k, default_prior().unwrap(), true, &mut seeded_rng(seed)).unwrap()
}

fn seq(values: &[f64]) -> EmbeddingSequence {
    EmbeddingSequence::scalars(values).unwrap()
}

#[test]
fn categoricals_normalize_and_ignore_the_future() {
    let spec = causal_spec(4, 1);
    let mut rng = seeded_rng(2);
    for _ in 0..20 {
        let xs = normal_vec(&mut rng, 5, 1.5);
        let y = [3, 0, 2, 1, 1];
        let x = seq(&xs);
        let mut longer = xs.clone();
        longer.push(9.0);
        let mut moved = xs.clone();
        moved[4] += 2.0;
        for t in 0..5 {
            let p = spec.factor(&y, &x, t).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Prefix stability: same bits at length n and n+1.
            let q = spec.factor(&y, &seq(&longer), t).unwrap();
            assert_eq!(p, q);
            if t < 4 {
                assert_eq!(p, spec.factor(&y, &seq(&moved), t).unwrap());
            }
        }
    }
}

#[test]
fn single_token_vocabulary_reduces_to_prior() {
    let spec = causal_spec(1, 3);
    let x = seq(&[0.2, -1.0, 0.7]);
    let joint = joint_log_prob(&spec, &[0, 0, 0], &x).unwrap();
    assert_eq!(joint, log_density(&spec.prior, &x).unwrap().total_log_density);
    let est = marginal_token_prob(&spec, &[0, 0, 0], 100, 4).unwrap();
    assert_eq!((est.value, est.std_error), (1.0, 0.0));
}

#[test]
fn conditional_law_sums_to_one_over_all_sequences() {
    let spec = causal_spec(3, 5);
    let x = seq(&[0.4, -0.3, 1.1]);
    let total: f64 = all_sequences(3, 3)
        .iter()
        .map(|y| spec.conditional_log_prob(y, &x).unwrap().exp())
        .sum();
    assert!((total - 1.0).abs() < 1e-12);
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let z: f64 = l.iter().map(|v| v.exp()).sum();
    l.iter().map(|v| v.exp() / z).collect()
}

#[test]
fn joint_matches_hand_composed_factors() {
    let spec = causal_spec(2, 6);
    let h = &spec.head;
    let (x1, x2) = (0.3, -0.8);
    let y = [1, 0];
    let p1 = softmax(&[h.bias[0] + h.w.at(0, 0) * x1, h.bias[1] + h.w.at(1, 0) * x1]);
    let p2 = softmax(&[
        h.bias[0] + h.w.at(0, 0) * x2 + h.prev.at(1, 0),
        h.bias[1] + h.w.at(1, 0) * x2 + h.prev.at(1, 1),
    ]);
    // a = -0.25 with one context value: μ₂ = x₁ and the block is 1.
    let log_n = |v: f64| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let want = p1[1].ln() + p2[0].ln() + log_n(x1) + log_n(x2 - x1);
    let got = joint_log_prob(&spec, &y, &seq(&[x1, x2])).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!(matches!(
        joint_log_prob(&spec, &[0], &seq(&[x1, x2])),
        Err(attnprior_core::Error::Dimension(_))
    ));
}

#[test]
fn summing_out_last_token() {
    let spec = causal_spec(3, 7);
    let x = seq(&[0.1, 1.2, -0.4, 0.9]);
    for prefix in all_sequences(3, 3) {
        let (a, b) = sum_out_last_token(&spec, &prefix, &x).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }
    let nc = TokenModelSpec::noncausal_instance().unwrap();
    let (a, b) = sum_out_last_token(&nc, &[1], &seq(&[0.0, -1.0])).unwrap();
    assert!((a - b).abs() > 0.1, "{a} {b}");
}

#[test]
fn ancestral_sampler_inverts_the_residual_map() {
    let prior = AttentionPriorParams::new(
        Tensor::matrix(2, 2, vec![-0.3, 0.1, 0.0, -0.2]).unwrap(),
        Tensor::eye(2),
        Tensor::eye(2),
        1.0,
        Masking::Strict,
    )
    .unwrap();
    let mut rng = seeded_rng(8);
    let prefix = normal_vec(&mut rng, 6, 1.0);
    let e = [0.7, -1.3];
    let z = solve_position(&prior, &prefix, &e).unwrap().unwrap();
    let mut all = prefix.clone();
    all.extend(&z);
    let x = EmbeddingSequence::new(Tensor::matrix(4, 2, all).unwrap()).unwrap();
    let r = attnprior_core::attention_prior::residuals(&prior, &x).unwrap();
    assert!((r.at(3, 0) - e[0]).abs() < 1e-12 && (r.at(3, 1) - e[1]).abs() < 1e-12);
}

#[test]
fn marginal_matches_quadrature_oracle() {
    let spec = causal_spec(2, 9);
    let y = [1, 0];
    let est = marginal_token_prob(&spec, &y, 4000, 10).unwrap();
    assert_eq!(est.rejected, 0);
    // Two positions: x₁ ~ N(0, 1), x₂ | x₁ ~ N(x₁, 1).
    let n = 241;
    let h = 24.0 / (n - 1) as f64;
    let phi = |v: f64| (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut oracle = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (x1, x2) = (-12.0 + h * i as f64, -12.0 + h * j as f64);
            let w = h * h * if i == 0 || i == n - 1 { 0.5 } else { 1.0 } * if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            let p = spec.conditional_log_prob(&y, &seq(&[x1, x2])).unwrap().exp();
            oracle += w * phi(x1) * phi(x2 - x1) * p;
        }
    }
    assert!((est.value - oracle).abs() <= 3.0 * est.std_error, "{} vs {oracle} (se {})", est.value, est.std_error);
    let again = marginal_token_prob(&spec, &y, 4000, 10).unwrap();
    assert_eq!(again.value.to_bits(), est.value.to_bits());
}

#[test]
fn shared_sample_marginals_are_consistent() {
    let spec = causal_spec(2, 11);
    let (a, b) = (
        marginal_token_prob(&spec, &[0, 1], 1000, 12).unwrap(),
        marginal_token_prob(&spec, &[0], 1000, 12).unwrap(),
    );
    let c = marginal_token_prob(&spec, &[0, 0], 1000, 12).unwrap();
    let se = (a.std_error.powi(2) + b.std_error.powi(2) + c.std_error.powi(2)).sqrt();
    assert!((a.value + c.value - b.value).abs() <= 3.0 * se);
}

#[test]
fn consistency_holds_exactly_under_shared_samples() {
    for s in 0..5 {
        let spec = TokenModelSpec::random(2, default_prior().unwrap(), true, &mut derived_rng(13, s)).unwrap();
        let r = kolmogorov_consistency_check(&spec, 3, s).unwrap();
        assert!(r.check.pass, "{:?}", r.check);
        assert_eq!(r.prefixes.len(), 4);
    }
    let nc = kolmogorov_consistency_check(&TokenModelSpec::noncausal_instance().unwrap(), 2, 0).unwrap();
    assert!(nc.check.discrepancy > NONCAUSAL_THRESHOLD, "{}", nc.check.discrepancy);
    assert!(!nc.check.pass);
    let json = serde_json::to_value(&nc.check).unwrap();
    for key in ["name", "instance", "discrepancy", "tolerance", "pass"] {
        assert!(json.get(key).is_some());
    }
}

#[test]
fn consistency_check_rejects_large_instances() {
    let spec = causal_spec(5, 14);
    assert!(kolmogorov_consistency_check(&spec, 3, 0).is_err());
    assert!(kolmogorov_consistency_check(&causal_spec(2, 14), 5, 0).is_err());
}

#[test]
fn two_token_counterexample_values() {
    assert_eq!(two_token_counterexample(), (0.82, 0.5));
    assert_eq!(TWO_TOKEN_BALANCED.marginals(), (0.5, 0.5));
    let r = TWO_TOKEN_COUNTEREXAMPLE.check();
    assert!(!r.pass);
    assert!((r.discrepancy - 0.32).abs() < 1e-12);
    assert!(TWO_TOKEN_BALANCED.check().pass);
}

#[test]
fn integrating_out_last_latent() {
    let spec = causal_spec(2, 15);
    let reports = integrate_out_last_latent_check(&spec, 16).unwrap();
    assert_eq!(reports.len(), 3);
    for r in &reports {
        assert!(r.pass, "{r:?}");
    }
}

#[test]
fn cylinder_sets_refine_additively() {
    let spec = causal_spec(3, 17);
    let m = 3000;
    let coarse = cylinder_frequencies(&spec, 2, m, 18).unwrap();
    let fine = cylinder_frequencies(&spec, 3, m, 19).unwrap();
    for (prefix, &p) in &coarse {
        let refined: f64 = fine.iter().filter(|(y, _)| y.starts_with(prefix)).map(|(_, v)| v).sum();
        let se = (p.max(1e-3) * (1.0 - p).max(1e-3) * 2.0 / m as f64).sqrt();
        assert!((p - refined).abs() <= 4.0 * se, "{prefix:?}: {p} vs {refined}");
    }
}

#[test]
fn module_checks_pass() {
    for r in run_checks(0).unwrap() {
        assert!(r.pass, "{r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn per_sample_consistency(xs in prop::collection::vec(-4.0f64..4.0, 2..5), seed in 0u64..1000) {
        let spec = causal_spec(3, seed);
        let x = seq(&xs);
        for prefix in all_sequences(3, xs.len() - 1) {
            let (a, b) = sum_out_last_token(&spec, &prefix, &x).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
