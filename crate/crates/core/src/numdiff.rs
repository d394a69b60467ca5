//! Central finite differences, used as the reference for analytic
//! derivatives throughout the crate.

/// Relative step: `h = STEP * max(1, |x|)`.
pub const STEP: f64 = 1e-5;

pub fn step_for(x: f64) -> f64 {
    STEP * x.abs().max(1.0)
}

/// Gradient of a scalar function.
pub fn gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = step_for(x[i]);
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Row-major `m x n` Jacobian of `f: R^n -> R^m` with respect to the inputs
/// listed in `cols` (all inputs when `None`).
pub fn jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], cols: Option<&[usize]>) -> Vec<Vec<f64>> {
    let all: Vec<usize> = (0..x.len()).collect();
    let cols = cols.unwrap_or(&all);
    let mut xp = x.to_vec();
    let columns: Vec<Vec<f64>> = cols
        .iter()
        .map(|&i| {
            let h = step_for(x[i]);
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        })
        .collect();
    let m = columns.first().map_or(0, Vec::len);
    (0..m)
        .map(|r| columns.iter().map(|c| c[r]).collect())
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise relative error, scaled by the larger of the two
/// vectors' max magnitudes (at least `floor`).
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = a
        .iter()
        .chain(b)
        .map(|v| v.abs())
        .fold(floor, f64::max);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}
