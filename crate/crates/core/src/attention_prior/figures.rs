//! One-dimensional sweeps contrasting positive and negative coupling.

use rayon::prelude::*;
use serde::Serialize;

use super::{all_stats, log_density, position_log_density, scalar_diag_derivative, AttentionPriorParams, EmbeddingSequence, Masking};
use crate::error::Result;
use crate::rng::{derived_rng, normal};

#[derive(Clone, Debug, Serialize)]
pub struct Figure2Config {
    pub x1: f64,
    pub x2: f64,
    pub sigma: f64,
    pub x3_min: f64,
    pub x3_max: f64,
    pub x3_points: usize,
    pub couplings: Vec<f64>,
    pub var_max: f64,
    pub var_points: usize,
}

impl Default for Figure2Config {
    fn default() -> Self {
        Figure2Config {
            x1: 0.0,
            x2: 2.0,
            sigma: 1.0,
            x3_min: -4.0,
            x3_max: 6.0,
            x3_points: 2001,
            couplings: vec![-0.55, -0.35, -0.25, 0.0, 0.25, 0.35, 0.55],
            var_max: 6.0,
            var_points: 601,
        }
    }
}

/// Conditional density of the third embedding given the first two.
#[derive(Clone, Debug, Serialize)]
pub struct Figure2Row {
    pub a: f64,
    pub x3: f64,
    pub density: f64,
    pub factor: f64,
    pub var: f64,
}

/// The diagonal factor `1 - a·Var` as a function of the dispersion.
#[derive(Clone, Debug, Serialize)]
pub struct FactorRow {
    pub a: f64,
    pub var: f64,
    pub factor: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Figure2Table {
    pub density: Vec<Figure2Row>,
    pub factor: Vec<FactorRow>,
}

impl Figure2Table {
    /// Largest density on the grid for coupling `a`, with its location.
    pub fn peak(&self, a: f64) -> Option<(f64, f64)> {
        self.density
            .iter()
            .filter(|r| r.a == a)
            .map(|r| (r.x3, r.density))
            .fold(None, |best, cur| match best {
                Some((_, d)) if d >= cur.1 => best,
                _ => Some(cur),
            })
    }

    /// First grid dispersion where the factor for `a` is no longer positive.
    pub fn degeneracy_var(&self, a: f64) -> Option<f64> {
        self.factor.iter().find(|r| r.a == a && r.factor <= 0.0).map(|r| r.var)
    }
}

fn grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
    (0..n).map(move |i| lo + step * i as f64)
}

pub fn figure2_sweep(cfg: &Figure2Config) -> Result<Figure2Table> {
    let mut density = Vec::new();
    let mut factor = Vec::new();
    for &a in &cfg.couplings {
        let params = AttentionPriorParams::scalar(a, cfg.sigma, Masking::Strict)?;
        for x3 in grid(cfg.x3_min, cfg.x3_max, cfg.x3_points) {
            let x = EmbeddingSequence::scalars(&[cfg.x1, cfg.x2, x3])?;
            let ld = position_log_density(&params, &x, 2)?;
            let stats = all_stats(&params, &x)?.pop().expect("three positions");
            density.push(Figure2Row {
                a,
                x3,
                density: ld.exp(),
                factor: stats.diag_block[0],
                var: stats.cov[0],
            });
        }
        for var in grid(0.0, cfg.var_max, cfg.var_points) {
            let spread = var.sqrt();
            factor.push(FactorRow {
                a,
                var,
                factor: scalar_diag_derivative(a, &[0.5, 0.5], &[-spread, spread]),
            });
        }
    }
    Ok(Figure2Table { density, factor })
}

#[derive(Clone, Debug, Serialize)]
pub struct Figure3Config {
    pub sequences: usize,
    pub len: usize,
    /// Standard deviation of the i.i.d. Gaussian embeddings.
    pub embed_std: f64,
    pub sigma: f64,
}

impl Default for Figure3Config {
    fn default() -> Self {
        Figure3Config {
            sequences: 4000,
            len: 5,
            embed_std: 2.0,
            sigma: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Figure3Row {
    pub index: usize,
    /// Attention-weighted variance at the final position.
    pub var: f64,
    /// Diagonal factor at the final position.
    pub factor: f64,
    #[serde(serialize_with = "crate::report::ser_f64")]
    pub log_density: f64,
    pub valid: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Figure3Table {
    pub a: f64,
    pub rows: Vec<Figure3Row>,
    pub valid_count: usize,
}

/// Scores `cfg.sequences` random sequences under coupling `a`. Sequence `i`
/// draws from its own stream derived from `seed`, so the table does not
/// depend on how the work is split across threads.
pub fn figure3_population(cfg: &Figure3Config, a: f64, seed: u64) -> Result<Figure3Table> {
    let params = AttentionPriorParams::scalar(a, cfg.sigma, Masking::Strict)?;
    let rows = (0..cfg.sequences)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(seed, i as u64);
            let values: Vec<f64> = (0..cfg.len).map(|_| cfg.embed_std * normal(&mut rng)).collect();
            let x = EmbeddingSequence::scalars(&values)?;
            let report = log_density(&params, &x)?;
            let last = all_stats(&params, &x)?.pop().expect("nonempty");
            Ok(Figure3Row {
                index: i,
                var: last.cov[0],
                factor: last.diag_block[0],
                log_density: report.total_log_density,
                valid: report.valid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let valid_count = rows.iter().filter(|r| r.valid).count();
    Ok(Figure3Table { a, rows, valid_count })
}
