//! Anisotropic total variation.
//!
//! `ρ(x) = Σₙ |[D₁x]ₙ| + |[D₂x]ₙ|` where `D₁` differences along rows
//! (vertical) and `D₂` along columns (horizontal). The last row (resp. column)
//! of each difference is zero, which is the replicate boundary: constants map
//! to exactly zero and both operators have a simple adjoint. Color images sum
//! the per-channel penalties.

use std::sync::Arc;

use crate::error::{ensure, Result};
use crate::tensor::{Element, Graph, LinearOperator, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffAxis {
    /// `D₁`: `x[i+1, j] − x[i, j]`.
    Vertical,
    /// `D₂`: `x[i, j+1] − x[i, j]`.
    Horizontal,
}

/// Forward difference along one spatial axis with a replicate boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiffOperator {
    pub axis: DiffAxis,
}

fn plane_dims(shape: &[usize]) -> (usize, usize) {
    let n = shape.len();
    if n >= 2 {
        (shape[n - 2], shape[n - 1])
    } else {
        (1, shape[0])
    }
}

impl DiffOperator {
    pub const D1: Self = Self {
        axis: DiffAxis::Vertical,
    };
    pub const D2: Self = Self {
        axis: DiffAxis::Horizontal,
    };

    /// Distance between neighbours along the axis, and whether `(r, c)` has one.
    fn step(&self, h: usize, w: usize) -> (usize, impl Fn(usize, usize) -> bool) {
        let axis = self.axis;
        let stride = match axis {
            DiffAxis::Vertical => w,
            DiffAxis::Horizontal => 1,
        };
        (stride, move |r: usize, c: usize| match axis {
            DiffAxis::Vertical => r + 1 < h,
            DiffAxis::Horizontal => c + 1 < w,
        })
    }

    pub fn forward<T: Element>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (h, w) = plane_dims(x.shape());
        let (stride, inside) = self.step(h, w);
        let mut out = vec![T::zero(); x.len()];
        for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
            for r in 0..h {
                for c in 0..w {
                    let i = r * w + c;
                    if inside(r, c) {
                        dst[i] = src[i + stride] - src[i];
                    }
                }
            }
        }
        Tensor::from_parts(x.shape().to_vec(), out)
    }

    pub fn transpose<T: Element>(&self, y: &Tensor<T>) -> Tensor<T> {
        let (h, w) = plane_dims(y.shape());
        let (stride, inside) = self.step(h, w);
        let mut out = vec![T::zero(); y.len()];
        for (src, dst) in y.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
            for r in 0..h {
                for c in 0..w {
                    let i = r * w + c;
                    if inside(r, c) {
                        dst[i + stride] = dst[i + stride] + src[i];
                        dst[i] = dst[i] - src[i];
                    }
                }
            }
        }
        Tensor::from_parts(y.shape().to_vec(), out)
    }
}

impl<T: Element> LinearOperator<T> for DiffOperator {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x))
    }

    fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.transpose(y))
    }
}

pub fn d1<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    DiffOperator::D1.forward(x)
}

pub fn d2<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    DiffOperator::D2.forward(x)
}

fn check_image(shape: &[usize]) -> Result<()> {
    ensure!(shape.len() == 4, "TV expects a 1×C×H×W image, got {shape:?}");
    ensure!(
        shape[1] == 1 || shape[1] == 3,
        "TV supports 1 or 3 channels, got {}",
        shape[1]
    );
    Ok(())
}

/// Differentiable `Σ charbonnier(D₁x) + charbonnier(D₂x)` on the graph.
pub fn tv_aniso<T: Element>(graph: &mut Graph<T>, x: Var, eps: f64) -> Result<Var> {
    check_image(graph.value(x).shape())?;
    let mut total = None;
    for op in [DiffOperator::D1, DiffOperator::D2] {
        let d = graph.linear(x, Arc::new(op))?;
        let a = graph.charbonnier_abs(d, eps)?;
        let s = graph.sum(a);
        total = Some(match total {
            None => s,
            Some(t) => graph.add(t, s)?,
        });
    }
    Ok(total.expect("two terms"))
}

/// Value-only TV accumulated in f64.
pub fn tv_aniso_value<T: Element>(x: &Tensor<T>, eps: f64) -> Result<f64> {
    check_image(x.shape())?;
    let e2 = eps * eps;
    let mut total = 0.0;
    for op in [DiffOperator::D1, DiffOperator::D2] {
        total += op
            .forward(x)
            .data()
            .iter()
            .map(|v| (v.f64() * v.f64() + e2).sqrt())
            .sum::<f64>();
    }
    Ok(total)
}

/// Closed-form gradient `Σₖ Dₖᵀ (Dₖx / √((Dₖx)² + eps²))`, assembled without the tape.
pub fn tv_grad_oracle(x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>> {
    check_image(x.shape())?;
    ensure!(eps > 0.0, "TV gradient needs eps > 0 (|·| has a kink at 0)");
    let mut grad = Tensor::zeros(x.shape());
    for op in [DiffOperator::D1, DiffOperator::D2] {
        let d = op.forward(x);
        let dphi = d.map(|v| v / (v * v + eps * eps).sqrt());
        grad.add_assign(&op.transpose(&dphi));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(&[1, 1, h, w], data.to_vec()).unwrap()
    }

    #[test]
    fn hand_evaluated_differences() {
        let x = img(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(d2(&x).data(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(d1(&x).data(), &[0.0; 4]);
        assert_eq!(tv_aniso_value(&x, 0.0).unwrap(), 2.0);
    }

    #[test]
    fn constant_image_has_zero_tv_and_gradient() {
        let x = Tensor::full(&[1, 3, 5, 4], 0.7);
        assert!(d1(&x).data().iter().all(|&v| v == 0.0));
        assert!(d2(&x).data().iter().all(|&v| v == 0.0));
        assert_eq!(tv_aniso_value(&x, 0.0).unwrap(), 0.0);
        let g = tv_grad_oracle(&x, 1e-3).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposes_pass_dot_test() {
        let x = Tensor::from_fn(&[1, 1, 4, 5], |i| ((i * 7) % 11) as f64 - 5.0);
        let y = Tensor::from_fn(&[1, 1, 4, 5], |i| ((i * 3) % 5) as f64 * 0.5);
        for op in [DiffOperator::D1, DiffOperator::D2] {
            let lhs = op.forward(&x).dot_f64(&y);
            let rhs = x.dot_f64(&op.transpose(&y));
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        assert!(tv_aniso_value(&x, 0.0).is_err());
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        assert!(tv_grad_oracle(&x, 0.0).is_err());
    }
}
