//! Central-finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward evaluation, so it stays
//! independent of the backward implementation it is used to verify.

use ndarray::ArrayD;

/// Central difference of a scalar-valued function at `x`, one coordinate at
/// a time: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference(f: &mut dyn FnMut(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, h: f64) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let slice = probe.as_slice_mut().expect("contiguous probe");
        let orig = slice[idx];
        slice[idx] = orig + h;
        let plus = f(&probe);
        let slice = probe.as_slice_mut().expect("contiguous probe");
        slice[idx] = orig - h;
        let minus = f(&probe);
        let slice = probe.as_slice_mut().expect("contiguous probe");
        slice[idx] = orig;
        grad.as_slice_mut().expect("contiguous grad")[idx] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Worst-case relative error between two gradients. The denominator floors
/// at 1 so that near-zero entries are compared absolutely.
pub fn max_relative_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Compares an analytic gradient against central differences of `f` at `x`.
/// Returns the max relative error.
pub fn compare(
    f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
    x: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    h: f64,
) -> f64 {
    let numeric = central_difference(f, x, h);
    max_relative_error(analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn quadratic_gradient_checks_out() {
        let x = arr1(&[1.0, -2.0, 0.5]).into_dyn();
        let mut f = |v: &ArrayD<f64>| v.iter().map(|&a| a * a).sum::<f64>();
        let analytic = x.mapv(|a| 2.0 * a);
        assert!(compare(&mut f, &x, &analytic, 1e-5) < 1e-9);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = arr1(&[1.0]).into_dyn();
        let mut f = |v: &ArrayD<f64>| v[[0]] * v[[0]];
        let wrong = arr1(&[3.0]).into_dyn();
        assert!(compare(&mut f, &x, &wrong, 1e-5) > 0.3);
    }
}
