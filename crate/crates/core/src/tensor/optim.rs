use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment buffers, one per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamWState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamWState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamWState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with decoupled weight decay at learning rate `lr`.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * cfg.weight_decay * *w;
            *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Cosine decay from `base` to zero over `total` steps, without warmup.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded_rng};

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_fn(&[2, 3], |i| i as f64)];
        let before = p.clone();
        let g = vec![Tensor::zeros(&[2, 3])];
        let mut st = AdamWState::new(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st, &no_decay(), 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn descends_on_square() {
        let mut p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(2.0)];
        let mut st = AdamWState::new(&p);
        adamw_step(&mut p, &g, &mut st, &no_decay(), 0.1).unwrap();
        assert!(p[0].item() < 1.0);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = (w0 - 3)^2 + 2 (w1 + 1)^2
        let target = [3.0, -1.0];
        let cfg = AdamWConfig {
            beta1: 0.5,
            ..no_decay()
        };
        let mut p = vec![Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()];
        let mut st = AdamWState::new(&p);
        for step in 0..100 {
            let w = p[0].data();
            let g = Tensor::new(vec![2], vec![2.0 * (w[0] - 3.0), 4.0 * (w[1] + 1.0)]).unwrap();
            let lr = cosine_lr(0.5, step, 100);
            adamw_step(&mut p, &[g], &mut st, &cfg, lr).unwrap();
        }
        for (w, t) in p[0].data().iter().zip(target) {
            assert!((w - t).abs() < 1e-3, "{w} vs {t}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = AdamWState::new(&p);
        let r = adamw_step(&mut p, &[Tensor::zeros(&[3])], &mut st, &no_decay(), 0.1);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::new(vec![2], vec![0.3, 0.4]).unwrap()];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);

        let mut g = vec![Tensor::new(vec![2], vec![1.2, 1.6]).unwrap()];
        clip_grad_norm(&mut g, 1.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[0].data()[1] - 0.8).abs() < 1e-15);

        let mut rng = seeded_rng(4);
        for _ in 0..50 {
            let mut g = vec![
                Tensor::new(vec![7], normal_vec(&mut rng, 7, 3.0)).unwrap(),
                Tensor::new(vec![3, 2], normal_vec(&mut rng, 6, 3.0)).unwrap(),
            ];
            clip_grad_norm(&mut g, 1.0);
            assert!(global_norm(&g) <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 10), 1e-3);
        assert!(cosine_lr(1e-3, 10, 10).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 5, 10) - 5e-4).abs() < 1e-15);
    }
}
