use attnprior_core::numdiff::{gradient, max_rel_err};
use attnprior_core::rng::{normal_vec, seeded_rng, Rng};
use attnprior_core::tensor::graph::{DetFloor, Mask};
use attnprior_core::{Graph, Result, Tensor, Var};
use proptest::prelude::*;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Compares tape gradients of `sum(build(inputs) * w)` for a fixed random `w`
/// against central differences, returning the worst relative error.
fn check(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let mut rng = seeded_rng(seed);
    let w = Tensor::new(g.shape(out).to_vec(), normal_vec(&mut rng, g.value(out).len(), 1.0)).unwrap();
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();

    let eval = |flat: &[f64]| {
        let mut g = Graph::new();
        let mut off = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let data = flat[off..off + t.len()].to_vec();
                off += t.len();
                g.constant(Tensor::new(t.shape().to_vec(), data).unwrap())
            })
            .collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = gradient(eval, &flat);
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.wrt(v).into_data()).collect();
    max_rel_err(&analytic, &numeric, 1e-3)
}

fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::new(shape.to_vec(), normal_vec(rng, shape.iter().product(), std)).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = g.constant(Tensor::eye(2));
    let p = g.matmul(i, m).unwrap();
    assert_eq!(g.value(p), g.value(m));
    let ones = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
    let r = g.matmul(m, ones).unwrap();
    assert_eq!(g.value(r).data(), &[3.0, 7.0]);
    let bad = g.matmul(ones, ones);
    assert!(matches!(bad, Err(attnprior_core::Error::Dimension(_))));
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    let mut rng = seeded_rng(11);
    let a = randn(&mut rng, &[3, 4], 1.0);
    let b = randn(&mut rng, &[4, 2], 1.0);
    let mut g = Graph::new();
    let av = g.param(a);
    let bv = g.constant(b.clone());
    let c = g.matmul(av, bv).unwrap();
    let s = g.sum(c);
    let ga = g.backward(s).unwrap().wrt(av);
    let want = Tensor::full(&[3, 2], 1.0).matmul(&b.transpose()).unwrap();
    assert!(ga.max_abs_diff(&want) < 1e-12);
}

#[test]
fn matmul_variants_match_finite_differences() {
    let mut rng = seeded_rng(12);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { randn(&mut rng, &[2, 4, 3], 1.0) } else { randn(&mut rng, &[2, 3, 4], 1.0) };
        let b = if tb { randn(&mut rng, &[2, 5, 4], 1.0) } else { randn(&mut rng, &[2, 4, 5], 1.0) };
        let e = check(&[a.clone(), b], &move |g, v| g.matmul_t(v[0], v[1], ta, tb), 1);
        assert!(e < 1e-6, "batched ta={ta} tb={tb}: {e}");
        let w = if tb { randn(&mut rng, &[5, 4], 1.0) } else { randn(&mut rng, &[4, 5], 1.0) };
        let e = check(&[a, w], &move |g, v| g.matmul_t(v[0], v[1], ta, tb), 2);
        assert!(e < 1e-6, "broadcast ta={ta} tb={tb}: {e}");
    }
}

#[test]
fn masked_softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(3, 3, vec![0.7; 9]).unwrap());
    let y = g.masked_softmax(x, Mask::Inclusive, 0).unwrap();
    let last = g.value(y).row(2).to_vec();
    assert!(last.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    assert_eq!(g.value(y).row(0), &[1.0, 0.0, 0.0]);

    let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 2f64.ln()]).unwrap());
    let y = g.masked_softmax(x, Mask::None, 0).unwrap();
    let r = g.value(y).row(0);
    assert!((r[0] - 1.0 / 3.0).abs() < 1e-15 && (r[1] - 2.0 / 3.0).abs() < 1e-15);

    let x = g.constant(Tensor::zeros(&[3, 3]));
    assert!(matches!(
        g.masked_softmax(x, Mask::Strict, 0),
        Err(attnprior_core::Error::EmptyContext { row: 0 })
    ));
}

#[test]
fn masked_softmax_jacobian_is_diag_minus_outer() {
    let mut rng = seeded_rng(13);
    for _ in 0..20 {
        let n = 5;
        let logits = normal_vec(&mut rng, n, 2.0);
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(1, n, logits.clone()).unwrap());
        let y = g.masked_softmax(x, Mask::None, 0).unwrap();
        let alpha = g.value(y).data().to_vec();
        for k in 0..n {
            let mut seed = vec![0.0; n];
            seed[k] = 1.0;
            let row = g.backward_with(y, seed).unwrap().wrt(x).into_data();
            for j in 0..n {
                let want = if j == k { alpha[k] } else { 0.0 } - alpha[k] * alpha[j];
                assert!((row[j] - want).abs() < 1e-14);
            }
            let fd = gradient(
                |l| {
                    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
                    (l[k] - m).exp() / z
                },
                &logits,
            );
            assert!(max_rel_err(&row, &fd, 1e-3) < 1e-8);
        }
    }
}

#[test]
fn logabsdet_examples() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(4));
    let (l, _) = g.logabsdet(i, DetFloor::Sentinel(1e-12)).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let d = g.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.5]]).unwrap());
    let (l, _) = g.logabsdet(d, DetFloor::Sentinel(1e-12)).unwrap();
    assert!(g.value(l).item().abs() < 1e-15);
    for c in [-3.0, 0.25, 7.5] {
        let m = g.constant(Tensor::eye(3).scale(c));
        let (l, _) = g.logabsdet(m, DetFloor::Sentinel(1e-12)).unwrap();
        assert!((g.value(l).item() - 3.0 * f64::ln(f64::abs(c))).abs() < 1e-12);
    }
    let z = g.constant(Tensor::zeros(&[2, 2]));
    let (l, sat) = g.logabsdet(z, DetFloor::Sentinel(1e-12)).unwrap();
    assert_eq!((g.value(l).item(), sat), (f64::NEG_INFINITY, 1));
    let (l, sat) = g.logabsdet(z, DetFloor::Clamp(1e-12)).unwrap();
    assert_eq!((g.value(l).item(), sat), (1e-12f64.ln(), 1));
    let r = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.logabsdet(r, DetFloor::Clamp(1e-12)).is_err());
}

#[test]
fn logabsdet_gradient_3x3() {
    let mut rng = seeded_rng(14);
    for k in 0..10 {
        let m = randn(&mut rng, &[3, 3], 1.0);
        let e = check(&[m], &|g, v| Ok(g.logabsdet(v[0], DetFloor::Sentinel(1e-12))?.0), k);
        assert!(e < 1e-5, "{e}");
    }
    let m = randn(&mut rng, &[2, 3, 4, 4], 1.0);
    let e = check(&[m], &|g, v| Ok(g.logabsdet(v[0], DetFloor::Clamp(1e-12))?.0), 99);
    assert!(e < 1e-5, "{e}");
}

#[test]
fn elementwise_and_shape_ops() {
    let mut rng = seeded_rng(15);
    let a = randn(&mut rng, &[2, 3, 4], 1.0);
    let b = randn(&mut rng, &[2, 3, 4], 1.0);
    let c = randn(&mut rng, &[3, 4], 1.0);
    let cases: Vec<(&str, Box<Build>)> = vec![
        ("add", Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("gelu", Box::new(|g, v| Ok(g.gelu(v[1])))),
        ("mean", Box::new(|g, v| Ok(g.mean(v[0])))),
        ("reshape", Box::new(|g, v| g.reshape(v[0], &[6, 4]))),
        ("slice1", Box::new(|g, v| g.slice(v[0], 1, 1, 2))),
        ("slice2", Box::new(|g, v| g.slice(v[1], 2, 0, 3))),
        ("split", Box::new(|g, v| g.split_heads(v[0], 2))),
        ("split_merge", Box::new(|g, v| {
            let s = g.split_heads(v[0], 2)?;
            let s = g.scale(s, 2.0);
            g.merge_heads(s)
        })),
    ];
    for (name, f) in cases {
        let e = check(&[a.clone(), b.clone()], f.as_ref(), 3);
        assert!(e < 1e-7, "{name}: {e}");
    }
    let e = check(&[a, c], &|g, v| g.add_broadcast(v[0], v[1]), 4);
    assert!(e < 1e-7, "add_broadcast: {e}");
}

#[test]
fn eye_minus_and_weighted_cov() {
    let mut rng = seeded_rng(16);
    let m = randn(&mut rng, &[2, 3, 3], 1.0);
    let e = check(&[m], &|g, v| g.eye_minus(v[0]), 5);
    assert!(e < 1e-7, "{e}");

    let p = randn(&mut rng, &[2, 4, 5], 1.0);
    let x = randn(&mut rng, &[2, 5, 3], 1.0);
    let e = check(&[p, x.clone()], &|g, v| g.weighted_cov(v[0], v[1]), 6);
    assert!(e < 1e-7, "raw weights: {e}");

    let logits = randn(&mut rng, &[2, 5, 5], 1.0);
    let e = check(
        &[logits, x],
        &|g, v| {
            let p = g.masked_softmax(v[0], Mask::Inclusive, 0)?;
            g.weighted_cov(p, v[1])
        },
        7,
    );
    assert!(e < 1e-7, "softmax weights: {e}");
}

#[test]
fn weighted_cov_matches_definition() {
    let mut rng = seeded_rng(17);
    let x = randn(&mut rng, &[1, 4, 2], 1.0);
    let mut raw = normal_vec(&mut rng, 4, 1.0).iter().map(|v| v.exp()).collect::<Vec<_>>();
    let z: f64 = raw.iter().sum();
    raw.iter_mut().for_each(|v| *v /= z);
    let mut g = Graph::new();
    let pv = g.constant(Tensor::new(vec![1, 1, 4], raw.clone()).unwrap());
    let xv = g.constant(x.clone());
    let cov = g.weighted_cov(pv, xv).unwrap();
    let xd = x.data();
    let mean: Vec<f64> = (0..2).map(|j| (0..4).map(|s| raw[s] * xd[s * 2 + j]).sum()).collect();
    for i in 0..2 {
        for j in 0..2 {
            let second: f64 = (0..4).map(|s| raw[s] * xd[s * 2 + i] * xd[s * 2 + j]).sum();
            let want = second - mean[i] * mean[j];
            assert!((g.value(cov).data()[i * 2 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_cross_entropy_embedding() {
    let mut rng = seeded_rng(18);
    let x = randn(&mut rng, &[2, 3, 6], 1.5);
    let gamma = randn(&mut rng, &[6], 1.0);
    let beta = randn(&mut rng, &[6], 1.0);
    let e = check(&[x, gamma, beta], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), 8);
    assert!(e < 1e-6, "layer_norm: {e}");

    let logits = randn(&mut rng, &[4, 5], 2.0);
    let targets = [0usize, 4, 2, 2];
    let e = check(&[logits], &move |g, v| g.cross_entropy(v[0], &targets), 9);
    assert!(e < 1e-7, "cross_entropy: {e}");

    let table = randn(&mut rng, &[5, 3], 1.0);
    let ids = [1usize, 1, 4, 0, 2, 1];
    let e = check(&[table], &move |g, v| g.embedding(v[0], &ids, &[2, 3]), 10);
    assert!(e < 1e-7, "embedding: {e}");
}

#[test]
fn composed_matmul_softmax_logabsdet() {
    let mut rng = seeded_rng(19);
    let x = randn(&mut rng, &[4, 3], 1.0);
    let w = randn(&mut rng, &[3, 3], 0.3);
    let e = check(
        &[x, w],
        &|g, v| {
            let xw = g.matmul(v[0], v[1])?;
            let s = g.matmul_t(xw, v[0], false, true)?;
            let s = g.reshape(s, &[1, 4, 4])?;
            let p = g.masked_softmax(s, Mask::Inclusive, 0)?;
            let x3 = g.reshape(v[0], &[1, 4, 3])?;
            let cov = g.weighted_cov(p, x3)?;
            let block = g.matmul_t(cov, v[1], false, true)?;
            let block = g.eye_minus(block)?;
            Ok(g.logabsdet(block, DetFloor::Sentinel(1e-12))?.0)
        },
        20,
    );
    assert!(e < 1e-4, "{e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_shapes_match_finite_differences(l in 1usize..=8, d in 1usize..=8, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let x = randn(&mut rng, &[1, l, d], 1.0);
        let wq = randn(&mut rng, &[d, d], 0.5);
        let gamma = randn(&mut rng, &[d], 1.0);
        let beta = randn(&mut rng, &[d], 1.0);
        let e = check(
            &[x, wq, gamma, beta],
            &|g, v| {
                let h = g.layer_norm(v[0], v[2], v[3], 1e-5)?;
                let q = g.matmul(h, v[1])?;
                let s = g.matmul_t(q, h, false, true)?;
                let p = g.masked_softmax(s, Mask::Inclusive, 0)?;
                let a = g.matmul(p, h)?;
                let a = g.gelu(a);
                g.add(a, v[0])
            },
            seed ^ 1,
        );
        prop_assert!(e < 1e-4, "l={} d={} err={}", l, d, e);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..=8, keys in 1usize..=8, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let mut g = Graph::new();
        let x = g.constant(randn(&mut rng, &[rows, keys], 5.0));
        for (mask, off) in [(Mask::Inclusive, 0), (Mask::Strict, 1), (Mask::None, 0)] {
            let y = g.masked_softmax(x, mask, off).unwrap();
            for r in 0..rows {
                let row = g.value(y).row(r);
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                for (j, &v) in row.iter().enumerate() {
                    if !mask.allows(r, j, off) {
                        prop_assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn logabsdet_of_scaled_identity(d in 1usize..=8, c in -10.0f64..10.0) {
        prop_assume!(c.abs() > 1e-3);
        let mut g = Graph::new();
        let m = g.constant(Tensor::eye(d).scale(c));
        let (l, _) = g.logabsdet(m, DetFloor::Sentinel(1e-12)).unwrap();
        prop_assert!((g.value(l).item() - d as f64 * c.abs().ln()).abs() <= 1e-12);
    }
}
