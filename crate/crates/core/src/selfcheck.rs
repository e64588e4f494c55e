//! 64-bit finite-difference checks of every differentiable primitive and of
//! the full generator loss.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degradation::{gaussian_kernel, DegradationOperator};
use crate::error::{ensure, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::pipeline::loss_dip_tv;
use crate::tensor::{finite_diff_grad, max_rel_error, max_rel_error_with_floor, Graph, PadMode, Tensor, UpsampleMode, Var};
use crate::tv::tv_aniso;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type Builder = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduces an arbitrary output to a scalar with fixed random weights so
/// every output coordinate contributes a distinct sensitivity.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(out).shape().to_vec();
    if shape.iter().product::<usize>() == 1 {
        return Ok(out);
    }
    let w = g.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Compares autodiff against central differences for each input of `build`.
pub fn check_op(
    name: &str,
    inputs: &[Tensor<f64>],
    build: &Builder,
    h: f64,
    tolerance: f64,
) -> Result<CheckResult> {
    let eval = |values: &[Tensor<f64>], track: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|v| if track { g.param(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        let out = build(&mut g, &vars)?;
        let loss = project(&mut g, out, 7)?;
        let value = g.value(loss).item();
        if !track {
            return Ok((value, Vec::new()));
        }
        let mut grads = g.backward(loss)?;
        Ok((value, vars.iter().map(|v| grads.take(*v)).collect()))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    for (i, a) in analytic.into_iter().enumerate() {
        let a = a.unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = finite_diff_grad(
            |x| {
                let mut vals = inputs.to_vec();
                vals[i] = x.clone();
                eval(&vals, false).map(|r| r.0).unwrap_or(f64::NAN)
            },
            &inputs[i],
            h,
        );
        let err = max_rel_error(&a, &numeric);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        tolerance,
    })
}

/// One check per primitive (and per mode / stride where the code paths differ).
pub fn primitive_checks(seed: u64, tolerance: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let h = 1e-6;
    let x = random(&mut rng, &[1, 3, 6, 5], -1.0, 1.0);
    let w = random(&mut rng, &[2, 3, 3, 3], -0.5, 0.5);
    let b = random(&mut rng, &[2], -0.5, 0.5);

    for pad in [PadMode::Zero, PadMode::Reflect, PadMode::Replicate] {
        for stride in [1, 2] {
            out.push(check_op(
                &format!("conv2d {pad:?} stride {stride}"),
                &[x.clone(), w.clone(), b.clone()],
                &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad),
                h,
                tolerance,
            )?);
        }
    }
    let w1 = random(&mut rng, &[4, 3, 1, 1], -0.5, 0.5);
    out.push(check_op(
        "conv2d 1x1 no bias",
        &[x.clone(), w1],
        &|g, v| g.conv2d(v[0], v[1], None, 1, PadMode::Reflect),
        h,
        tolerance,
    )?);
    for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
        out.push(check_op(
            &format!("upsample {mode:?}"),
            std::slice::from_ref(&x),
            &move |g, v| g.upsample(v[0], 2, mode),
            h,
            tolerance,
        )?);
    }
    let gamma = random(&mut rng, &[3], 0.5, 1.5);
    let beta = random(&mut rng, &[3], -0.5, 0.5);
    out.push(check_op(
        "batch_norm",
        &[x.clone(), gamma.clone(), beta],
        &|g, v| g.batch_norm(v[0], v[1], v[2], 1e-5),
        h,
        tolerance,
    )?);
    // keep inputs away from the kink so ±h never straddles it
    let xk = x.map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
    out.push(check_op(
        "leaky_relu",
        std::slice::from_ref(&xk),
        &|g, v| g.leaky_relu(v[0], 0.1),
        h,
        tolerance,
    )?);
    out.push(check_op(
        "sigmoid",
        &[x.map(|v| 8.0 * v)],
        &|g, v| Ok(g.sigmoid(v[0])),
        h,
        tolerance,
    )?);
    let x2 = random(&mut rng, &[1, 3, 6, 5], -1.0, 1.0);
    let s = random(&mut rng, &[1], -1.0, 1.0);
    for (label, other) in [("same", x2.clone()), ("channel", gamma.clone()), ("scalar", s)] {
        out.push(check_op(
            &format!("add {label}"),
            &[x.clone(), other.clone()],
            &|g, v| g.add(v[0], v[1]),
            h,
            tolerance,
        )?);
        out.push(check_op(
            &format!("sub {label}"),
            &[other.clone(), x.clone()],
            &|g, v| g.sub(v[0], v[1]),
            h,
            tolerance,
        )?);
        out.push(check_op(
            &format!("mul {label}"),
            &[x.clone(), other],
            &|g, v| g.mul(v[0], v[1]),
            h,
            tolerance,
        )?);
    }
    out.push(check_op(
        "scale",
        std::slice::from_ref(&x),
        &|g, v| Ok(g.scale(v[0], -2.5)),
        h,
        tolerance,
    )?);
    out.push(check_op(
        "sum",
        std::slice::from_ref(&x),
        &|g, v| Ok(g.sum(v[0])),
        h,
        tolerance,
    )?);
    out.push(check_op(
        "sq_l2",
        std::slice::from_ref(&x),
        &|g, v| Ok(g.sq_l2(v[0])),
        h,
        tolerance,
    )?);
    out.push(check_op(
        "charbonnier_abs",
        std::slice::from_ref(&x),
        &|g, v| g.charbonnier_abs(v[0], 1e-2),
        h,
        tolerance,
    )?);
    out.push(check_op(
        "concat_channels",
        &[x.clone(), first_channel(&x2)],
        &|g, v| g.concat_channels(&[v[0], v[1]]),
        h,
        tolerance,
    )?);
    let blur = Arc::new(DegradationOperator::Blur(gaussian_kernel(1.0, 3)?));
    out.push(check_op(
        "linear blur",
        std::slice::from_ref(&x),
        &move |g, v| g.linear(v[0], blur.clone()),
        h,
        tolerance,
    )?);
    out.push(check_op(
        "tv_aniso",
        std::slice::from_ref(&x),
        &|g, v| tv_aniso(g, v[0], 1e-2),
        h,
        tolerance,
    )?);
    Ok(out)
}

/// First channel only, to exercise concatenation of unequal widths.
fn first_channel(t: &Tensor<f64>) -> Tensor<f64> {
    let s = t.shape();
    let hw = s[2] * s[3];
    Tensor::new(&[1, 1, s[2], s[3]], t.data()[..hw].to_vec()).expect("valid shape")
}

/// Gradient of the full restoration loss (blur forward model plus TV) for
/// every parameter tensor of a depth-`depth`, 8-channel generator on a
/// `size × size` image. The input `z` is checked too.
///
/// Batch-norm scales and shifts are randomized first; at their initial
/// values (1, 0) leaky ReLU's homogeneity followed by the next normalization
/// makes most scale gradients vanish. Conv biases feeding a normalization
/// still have an exactly zero gradient, so the relative-error floor is taken
/// from the largest gradient entry anywhere in the network rather than per
/// tensor.
pub fn generator_checks(size: usize, depth: usize, seed: u64, tolerance: f64) -> Result<Vec<CheckResult>> {
    let cfg = GeneratorConfig {
        input_channels: 8,
        optimize_input: true,
        seed,
        ..GeneratorConfig::uniform(depth, 8, 4)
    };
    ensure!(
        size % cfg.size_multiple() == 0,
        "size {size} must be a multiple of {}",
        cfg.size_multiple()
    );
    let mut gen = Generator::<f64>::build(&cfg, size, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in gen.params.iter_mut() {
        if name.ends_with(".gamma") {
            *t = random(&mut rng, t.shape(), 0.5, 1.5);
        } else if name.ends_with(".beta") {
            *t = random(&mut rng, t.shape(), -0.5, 0.5);
        }
    }
    let y = random(&mut rng, &[1, 1, size, size], 0.0, 1.0);
    let op = Arc::new(DegradationOperator::Blur(gaussian_kernel(1.0, 3)?));
    let (lambda, eps) = (0.05, 1e-2);

    let loss_of = |g: &Generator<f64>| -> f64 {
        let mut graph = Graph::new();
        match loss_dip_tv(&mut graph, &y, &op, g, lambda, eps) {
            Ok((loss, _)) => graph.value(loss).item(),
            Err(_) => f64::NAN,
        }
    };

    let mut graph = Graph::new();
    let (loss, bound) = loss_dip_tv(&mut graph, &y, &op, &gen, lambda, eps)?;
    let mut grads = graph.backward(loss)?;
    let analytic = bound.collect(&mut grads)?;
    drop(graph);

    let h = 1e-6;
    let mut numeric = Vec::new();
    for name in analytic.keys() {
        let current = if name == Generator::<f64>::INPUT_KEY {
            gen.input.clone()
        } else {
            gen.params.get(name).expect("known parameter").clone()
        };
        numeric.push(finite_diff_grad(
            |x| {
                let mut g = gen.clone();
                if name == Generator::<f64>::INPUT_KEY {
                    g.input = x.clone();
                } else {
                    *g.params.get_mut(name).expect("known parameter") = x.clone();
                }
                loss_of(&g)
            },
            &current,
            h,
        ));
    }
    let global = numeric
        .iter()
        .flat_map(|t| t.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|((name, a), n)| CheckResult {
            name: format!("generator {name}"),
            max_rel_error: max_rel_error_with_floor(a, n, 1e-3 * global),
            tolerance,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for r in primitive_checks(1, 1e-5).unwrap() {
            assert!(r.passed(), "{} {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn small_generator_passes() {
        let rs = generator_checks(8, 1, 3, 1e-4).unwrap();
        assert!(rs.len() > 10);
        for r in rs {
            assert!(r.passed(), "{} {}", r.name, r.max_rel_error);
        }
    }
}
