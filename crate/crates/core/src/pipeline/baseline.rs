//! Classical TV-regularized least squares solved directly over pixels.

use std::sync::Arc;

use super::restore::{objective_on, Method, RestoreConfig};
use super::metrics::snr_db;
use crate::degradation::DegradationOperator;
use crate::error::{ensure, Result};
use crate::tensor::{Element, Graph, Tensor};
use crate::tv::tv_aniso_value;

/// Smoothing used by the baseline unless configured otherwise. Much smaller
/// values make the `1/L` step vanishingly small.
pub const DEFAULT_BASELINE_TV_EPS: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct BaselineResult<T> {
    pub image: Tensor<T>,
    /// Objective after each iteration, preceded by the starting value.
    pub objective: Vec<f64>,
    pub restarts: usize,
    pub step_size: f64,
}

/// Upper bound on `‖H‖₂²` from power iteration on `HᵀH`, padded by 2%.
pub fn operator_norm_sq(op: &DegradationOperator, shape: &[usize]) -> Result<f64> {
    if matches!(op, DegradationOperator::Identity) {
        return Ok(1.0);
    }
    let mut x = Tensor::<f64>::from_fn(shape, |i| 1.0 + ((i * 7919) % 13) as f64 / 13.0);
    let mut est = 0.0;
    for _ in 0..50 {
        let n = x.norm_sq_f64().sqrt();
        x = x.map(|v| v / n);
        let y = op.adjoint(&op.apply(&x)?)?;
        est = y.dot_f64(&x);
        x = y;
    }
    Ok(est * 1.02)
}

pub fn objective_value<T: Element>(
    y: &Tensor<T>,
    op: &DegradationOperator,
    x: &Tensor<T>,
    lambda: f64,
    tv_eps: f64,
) -> Result<f64> {
    let hx = op.apply(x)?;
    let data: f64 = hx
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (b.f64() - a.f64()).powi(2))
        .sum();
    Ok(data + lambda * tv_aniso_value(x, tv_eps)?)
}

/// Minimizes `‖y − Hx‖² + λ·TV_eps(x)` by Nesterov-accelerated gradient descent
/// with step `1/L`, `L = 2‖H‖² + 8λ/eps`.
///
/// Momentum restarts whenever the objective would increase; if the plain
/// gradient step from the current iterate still does not decrease it, the
/// iterate is kept. The recorded objective is therefore non-increasing.
///
/// Iterates are kept in double precision whatever `T` is; with single
/// precision the per-step decrease drowns in rounding and momentum restarts
/// on almost every step.
pub fn restore_tv_baseline<T: Element>(
    y: &Tensor<T>,
    op: &DegradationOperator,
    cfg: &RestoreConfig,
) -> Result<BaselineResult<T>> {
    let r = solve(&y.cast::<f64>(), op, cfg)?;
    Ok(BaselineResult {
        image: r.image.cast(),
        objective: r.objective,
        restarts: r.restarts,
        step_size: r.step_size,
    })
}

fn solve(y: &Tensor<f64>, op: &DegradationOperator, cfg: &RestoreConfig) -> Result<BaselineResult<f64>> {
    type T = f64;
    ensure!(
        cfg.method == Method::TvBaseline,
        "restore_tv_baseline needs method tv_baseline, got {}",
        cfg.method
    );
    ensure!(cfg.lambda > 0.0, "TV baseline needs lambda > 0, got {}", cfg.lambda);
    ensure!(cfg.tv_eps > 0.0, "TV baseline needs tv_eps > 0 for a finite step size");
    ensure!(cfg.steps >= 1, "steps must be at least 1");
    let (lambda, eps) = (cfg.lambda, cfg.tv_eps);
    let lipschitz = 2.0 * operator_norm_sq(op, y.shape())? + lambda * 8.0 / eps;
    let step = 1.0 / lipschitz;
    let op_arc = Arc::new(op.clone());

    let gradient = |x: &Tensor<T>| -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let loss = objective_on(&mut g, y, &op_arc, xv, lambda, eps)?;
        let mut grads = g.backward(loss)?;
        Ok(grads.take(xv).expect("tracked leaf"))
    };
    let descend = |x: &Tensor<T>, grad: &Tensor<T>| -> Tensor<T> {
        x.zip_map(grad, |a, b| a - T::of(step) * b).expect("same shape")
    };

    let mut x = y.clone();
    let mut f = objective_value(y, op, &x, lambda, eps)?;
    let mut v = x.clone();
    let mut t = 1.0f64;
    let mut objective = vec![f];
    let mut restarts = 0;
    for _ in 0..cfg.steps {
        let mut x_new = descend(&v, &gradient(&v)?);
        let mut f_new = objective_value(y, op, &x_new, lambda, eps)?;
        if f_new > f {
            restarts += 1;
            t = 1.0;
            x_new = descend(&x, &gradient(&x)?);
            f_new = objective_value(y, op, &x_new, lambda, eps)?;
            if f_new > f {
                x_new = x.clone();
                f_new = f;
            }
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let momentum = T::of((t - 1.0) / t_next);
        v = x_new
            .zip_map(&x, |a, b| a + momentum * (a - b))
            .expect("same shape");
        x = x_new;
        f = f_new;
        t = t_next;
        objective.push(f);
    }
    Ok(BaselineResult {
        image: x,
        objective,
        restarts,
        step_size: step,
    })
}

/// Runs the baseline for each λ and keeps the best-SNR result against `reference`.
pub fn tune_tv_baseline<T: Element>(
    y: &Tensor<T>,
    op: &DegradationOperator,
    cfg: &RestoreConfig,
    lambdas: &[f64],
    reference: &Tensor<T>,
) -> Result<(f64, BaselineResult<T>)> {
    ensure!(!lambdas.is_empty(), "empty lambda grid");
    let mut best: Option<(f64, f64, BaselineResult<T>)> = None;
    for &lambda in lambdas {
        let run = restore_tv_baseline(y, op, &RestoreConfig { lambda, ..cfg.clone() })?;
        let s = snr_db(reference, &run.image)?;
        if best.as_ref().is_none_or(|(_, bs, _)| s > *bs) {
            best = Some((lambda, s, run));
        }
    }
    let (lambda, _, run) = best.expect("non-empty grid");
    Ok((lambda, run))
}
