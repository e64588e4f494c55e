use super::Tensor;

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest entrywise relative error between two gradients.
///
/// Each entry is compared against `max(|a|, |b|, 1e-3·‖b‖∞, 1e-12)`, so
/// coordinates that are tiny next to the bulk of the gradient are judged on
/// the gradient's own scale instead of their own.
pub fn max_rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    max_rel_error_with_floor(analytic, numeric, 0.0)
}

/// [`max_rel_error`] with an extra absolute floor on the denominator, for
/// tensors whose true gradient vanishes (parameters a later normalization
/// makes irrelevant) and whose finite differences are pure rounding noise.
pub fn max_rel_error_with_floor(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let scale = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(floor).max(1e-12);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_sigmoid() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-6);
        assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);

        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let g = finite_diff_grad(|t| 1.0 / (1.0 + (-t.data()[0]).exp()), &x, 1e-6);
        assert!((g.data()[0] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn rel_error_is_zero_for_identical() {
        let a = Tensor::new(&[3], vec![1.0, -2.0, 0.0]).unwrap();
        assert_eq!(max_rel_error(&a, &a), 0.0);
    }
}
