//! Central finite differences for verifying reverse-mode gradients.

use super::tensor::Tensor;

/// Relative error with an absolute floor so that vanishing gradients compare sanely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + εe_i) − f(x − εe_i)) / 2ε` for each requested coordinate `i`.
pub fn central_difference(
    x: &Tensor,
    coords: &[usize],
    eps: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let up = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Worst relative error between analytic gradients and finite differences over `coords`.
pub fn max_relative_error(
    x: &Tensor,
    analytic: &Tensor,
    coords: &[usize],
    eps: f64,
    floor: f64,
    f: impl FnMut(&Tensor) -> f64,
) -> f64 {
    let numeric = central_difference(x, coords, eps, f);
    coords
        .iter()
        .zip(numeric)
        .map(|(&i, n)| relative_error(analytic.data()[i], n, floor))
        .fold(0.0, f64::max)
}
