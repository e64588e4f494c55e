use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GradMap, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected ADAM moments for a set of named tensors.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: GradMap<T>,
    pub v: GradMap<T>,
    /// Number of completed steps.
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: GradMap::new(),
            v: GradMap::new(),
            t: 0,
        }
    }

    /// One update of every target. Fails before touching anything if a
    /// target has no gradient or a gradient has the wrong shape.
    pub fn step_named<'a>(
        &mut self,
        targets: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
        grads: &GradMap<T>,
    ) -> Result<()> {
        let targets: Vec<_> = targets.into_iter().collect();
        for (name, p) in &targets {
            let g = grads
                .get(*name)
                .ok_or_else(|| Error::invalid(format!("missing gradient for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::invalid(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = T::of(1.0 - beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - beta2.powi(self.t as i32));
        let (lr, b1, b2, eps) = (T::of(lr), T::of(beta1), T::of(beta2), T::of(eps));
        let one = T::one();
        for (name, p) in targets {
            let g = &grads[name];
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for (((th, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *th = *th - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &GradMap<T>) -> Result<()> {
        self.step_named(params.iter_mut(), grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(theta: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::scalar(theta)).unwrap();
        p
    }

    fn grad(g: f64) -> GradMap<f64> {
        GradMap::from([("theta".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = single(1.0);
        let mut s = AdamState::new(AdamConfig::default());
        s.step(&mut p, &grad(1.0)).unwrap();
        let theta = p.get("theta").unwrap().item();
        assert_eq!(theta, 1.0 - 0.01 * 1.0 / (1.0 + 1e-8));
        assert!((theta - 0.99).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = single(0.3);
        let mut s = AdamState::new(AdamConfig::default());
        for _ in 0..3 {
            s.step(&mut p, &grad(0.0)).unwrap();
        }
        assert_eq!(p.get("theta").unwrap().item(), 0.3);
        assert_eq!(s.t, 3);
    }

    #[test]
    fn missing_or_misshapen_gradient() {
        let mut p = single(0.3);
        let mut s = AdamState::new(AdamConfig::default());
        assert!(s.step(&mut p, &GradMap::new()).is_err());
        let bad = GradMap::from([("theta".to_string(), Tensor::zeros(&[2]))]);
        assert!(s.step(&mut p, &bad).is_err());
        assert_eq!(s.t, 0);
    }
}
