//! Central finite differences, used as an independent gradient oracle.

use super::Tensor;

/// Estimates `∂f/∂x` coordinate by coordinate as
/// `(f(x + εe) − f(x − εe)) / 2ε`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Vec<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients from
/// turning rounding noise into large relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
