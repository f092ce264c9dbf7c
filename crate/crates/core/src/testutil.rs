//! Shared helpers for unit tests. Everything here is an independent check
//! path: finite differences and error metrics only, no reuse of the
//! implementation code under test.

use rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite differences of a scalar function at `point`.
pub fn finite_diff_grad(f: &dyn Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut grads = Vec::with_capacity(point.len());
    let mut perturbed = point.to_vec();
    for i in 0..point.len() {
        perturbed[i] = point[i] + h;
        let f_plus = f(&perturbed);
        perturbed[i] = point[i] - h;
        let f_minus = f(&perturbed);
        perturbed[i] = point[i];
        grads.push((f_plus - f_minus) / (2.0 * h));
    }
    grads
}

/// Relative error between two gradient vectors, scaled by the larger
/// infinity norm. A shared zero gradient scores 0; finite-difference noise
/// of ~1e-10 against a zero analytic gradient stays well under any
/// meaningful tolerance because the denominator is floored at 1e-6.
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let max_diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-6);
    max_diff / scale
}

/// Max elementwise relative error with a unit floor.
pub fn vector_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
