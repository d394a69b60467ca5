//! Fixed-node quadrature rules on the real line.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of the composite trapezoid rule on `[lo, hi]`.
pub fn trapezoid(lo: f64, hi: f64, points: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(points >= 2, "trapezoid rule needs two points");
    let h = (hi - lo) / (points - 1) as f64;
    let nodes = (0..points).map(|i| lo + h * i as f64).collect();
    let weights = (0..points)
        .map(|i| if i == 0 || i == points - 1 { h / 2.0 } else { h })
        .collect();
    (nodes, weights)
}

/// Gauss–Hermite rule for `∫ f(z) exp(-z²) dz`, from the eigenpairs of the
/// Jacobi matrix. Nodes are ascending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let off = (i as f64 / 2.0).sqrt();
        jacobi[(i, i - 1)] = off;
        jacobi[(i - 1, i)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mu0 = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Gauss–Hermite rule rescaled for expectations under `N(mean, std²)`:
/// weights sum to 1.
pub fn gauss_hermite_normal(n: usize, mean: f64, std: f64) -> (Vec<f64>, Vec<f64>) {
    let (z, w) = gauss_hermite(n);
    let s = std::f64::consts::PI.sqrt();
    (
        z.iter().map(|z| mean + std::f64::consts::SQRT_2 * std * z).collect(),
        w.iter().map(|w| w / s).collect(),
    )
}
