//! Signal-to-noise metrics on the [0, 255] pixel scale.

use crate::error::{ensure, Result};
use crate::tensor::{Element, Tensor};

/// Reported instead of +∞ when the estimate equals the reference.
pub const METRIC_CAP_DB: f64 = 300.0;

fn err_sq<T: Element>(reference: &Tensor<T>, estimate: &Tensor<T>) -> Result<f64> {
    ensure!(
        reference.shape() == estimate.shape(),
        "metric shape mismatch: {:?} vs {:?}",
        reference.shape(),
        estimate.shape()
    );
    Ok(reference
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(r, e)| (r.f64() - e.f64()).powi(2))
        .sum())
}

/// `20·log10(‖ref‖ / ‖ref − est‖)`.
pub fn snr_db<T: Element>(reference: &Tensor<T>, estimate: &Tensor<T>) -> Result<f64> {
    let e = err_sq(reference, estimate)?;
    let r = reference.norm_sq_f64();
    ensure!(r > 0.0, "SNR is undefined for an all-zero reference");
    if e == 0.0 {
        return Ok(METRIC_CAP_DB);
    }
    Ok((10.0 * (r / e).log10()).min(METRIC_CAP_DB))
}

/// `10·log10(peak²·N / ‖ref − est‖²)`.
pub fn psnr_db<T: Element>(reference: &Tensor<T>, estimate: &Tensor<T>, peak: f64) -> Result<f64> {
    let e = err_sq(reference, estimate)?;
    if e == 0.0 {
        return Ok(METRIC_CAP_DB);
    }
    Ok((10.0 * (peak * peak * reference.len() as f64 / e).log10()).min(METRIC_CAP_DB))
}
