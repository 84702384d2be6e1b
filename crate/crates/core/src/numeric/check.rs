//! Finite-difference gradient oracle.
//!
//! Independent of the tape: it only evaluates the function. Tests across the
//! crate compare analytic gradients against this.

/// Central-difference gradient of `f` at `x` with absolute step `step`.
pub fn central_difference_gradient<F>(f: &F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest per-coordinate deviation between `analytic` and `numeric`,
/// relative to the overall gradient scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric
        .iter()
        .chain(analytic.iter())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max)
}
