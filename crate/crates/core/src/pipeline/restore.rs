use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::metrics::snr_db;
use crate::degradation::DegradationOperator;
use crate::error::{ensure, Error, Result};
use crate::generator::{Bound, Generator, GeneratorConfig, Task};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::tv::tv_aniso;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dip,
    DipTv,
    TvBaseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dip => "dip",
            Method::DipTv => "dip_tv",
            Method::TvBaseline => "tv_baseline",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dip" => Ok(Method::Dip),
            "dip_tv" | "dip-tv" => Ok(Method::DipTv),
            "tv" | "tv_baseline" | "tv-baseline" => Ok(Method::TvBaseline),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Everything the objective leaves open: weight, budget, optimizer, seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestoreConfig {
    pub method: Method,
    /// TV weight; ignored for plain DIP.
    pub lambda: f64,
    pub steps: usize,
    pub adam: AdamConfig,
    /// Charbonnier smoothing inside the TV term, on the [0, 1] pixel scale.
    pub tv_eps: f64,
    /// Seeds the generator (weights and `z`); overrides `generator.seed`.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub log_every: usize,
    /// Return the best-SNR iterate when a reference is supplied.
    pub track_best: bool,
}

impl RestoreConfig {
    pub fn for_task(task: Task, method: Method) -> Self {
        let lr = match task {
            Task::Denoise => 0.01,
            Task::Deblur => 0.001,
        };
        let steps = match task {
            Task::Denoise => 5000,
            Task::Deblur => 5500,
        };
        Self {
            method,
            lambda: 0.0,
            steps,
            adam: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            tv_eps: 1e-6,
            seed: 0,
            generator: GeneratorConfig::default_for(task),
            log_every: 100,
            track_best: true,
        }
    }

    /// λ actually applied: zero for plain DIP.
    pub fn effective_lambda(&self) -> f64 {
        match self.method {
            Method::Dip => 0.0,
            _ => self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, "steps must be at least 1");
        ensure!(self.log_every >= 1, "log_every must be at least 1");
        ensure!(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            "lambda must be non-negative, got {}",
            self.lambda
        );
        ensure!(self.tv_eps >= 0.0, "tv_eps must be non-negative");
        ensure!(self.adam.lr > 0.0, "learning rate must be positive");
        self.generator.validate()
    }
}

/// `‖y − H x‖² + λ·TV(x)` recorded on `graph` for an image node `x`.
/// With `λ = 0` the TV branch is not recorded at all.
pub fn objective_on<T: Element>(
    graph: &mut Graph<T>,
    y: &Tensor<T>,
    op: &Arc<DegradationOperator>,
    x: Var,
    lambda: f64,
    tv_eps: f64,
) -> Result<Var> {
    let hx = match op.as_ref() {
        DegradationOperator::Identity => x,
        _ => graph.linear(x, op.clone())?,
    };
    ensure!(
        graph.value(hx).shape() == y.shape(),
        "measurement shape {:?} does not match H·x shape {:?}",
        y.shape(),
        graph.value(hx).shape()
    );
    let yv = graph.constant(y.clone());
    let r = graph.sub(yv, hx)?;
    let data = graph.sq_l2(r);
    if lambda == 0.0 {
        return Ok(data);
    }
    let tv = tv_aniso(graph, x, tv_eps)?;
    let tv = graph.scale(tv, lambda);
    graph.add(data, tv)
}

/// Records the DIP-TV loss for the generator's current parameters.
/// Returns the loss node and the generator bindings (output, parameters).
pub fn loss_dip_tv<T: Element>(
    graph: &mut Graph<T>,
    y: &Tensor<T>,
    op: &Arc<DegradationOperator>,
    gen: &Generator<T>,
    lambda: f64,
    tv_eps: f64,
) -> Result<(Var, Bound)> {
    let bound = gen.forward_on(graph)?;
    let loss = objective_on(graph, y, op, bound.output, lambda, tv_eps)?;
    Ok((loss, bound))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub snr_db: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BestIterate {
    /// Number of completed updates when the iterate was produced.
    pub step: usize,
    pub snr_db: f64,
}

#[derive(Clone, Debug)]
pub struct Restoration<T> {
    /// Returned estimate: the best iterate when selected, else `final_image`.
    pub image: Tensor<T>,
    pub final_image: Tensor<T>,
    pub final_snr_db: Option<f64>,
    pub best: Option<BestIterate>,
    pub selected_best: bool,
    pub trace: Vec<TracePoint>,
    pub generator: Generator<T>,
}

/// Fits `f_Θ(z)` to `y` with ADAM on the DIP / DIP-TV objective.
///
/// Step `t` evaluates the loss at the parameters left by `t − 1` updates and
/// then applies update `t`. `y` and `reference` are on the [0, 1] scale.
pub fn restore<T: Element>(
    y: &Tensor<T>,
    op: &DegradationOperator,
    cfg: &RestoreConfig,
    reference: Option<&Tensor<T>>,
) -> Result<Restoration<T>> {
    ensure!(
        matches!(cfg.method, Method::Dip | Method::DipTv),
        "restore() runs dip or dip_tv, got {}",
        cfg.method
    );
    cfg.validate()?;
    let (_, c, h, w) = y.dims4()?;
    let gen_cfg = GeneratorConfig {
        seed: cfg.seed,
        ..cfg.generator.clone()
    };
    ensure!(
        gen_cfg.output_channels == c,
        "generator emits {} channels but the measurement has {c}",
        gen_cfg.output_channels
    );
    if let Some(r) = reference {
        ensure!(r.shape() == y.shape(), "reference shape differs from measurement");
    }
    let mut gen = Generator::<T>::build(&gen_cfg, h, w)?;
    let op = Arc::new(op.clone());
    let lambda = cfg.effective_lambda();
    let mut adam = AdamState::new(cfg.adam);
    let track = cfg.track_best && reference.is_some();
    let mut best: Option<(BestIterate, Tensor<T>)> = None;
    let mut trace = Vec::new();
    let mut last_finite = None;

    let consider = |best: &mut Option<(BestIterate, Tensor<T>)>, step, img: &Tensor<T>| -> Result<Option<f64>> {
        let Some(r) = reference else { return Ok(None) };
        let s = snr_db(r, img)?;
        if track && best.as_ref().is_none_or(|(b, _)| s > b.snr_db) {
            *best = Some((BestIterate { step, snr_db: s }, img.clone()));
        }
        Ok(Some(s))
    };

    for step in 1..=cfg.steps {
        let mut graph = Graph::new();
        let (loss, bound) = loss_dip_tv(&mut graph, y, &op, &gen, lambda, cfg.tv_eps)?;
        let loss_value = graph.value(loss).item().f64();
        if !loss_value.is_finite() {
            return Err(Error::Divergence {
                step,
                last_finite_step: last_finite,
            });
        }
        last_finite = Some(step);
        let snr = consider(&mut best, step - 1, graph.value(bound.output))?;
        if step % cfg.log_every == 0 || step == cfg.steps {
            trace.push(TracePoint {
                step,
                loss: loss_value,
                snr_db: snr,
            });
        }
        let mut grads = graph.backward(loss)?;
        let grads = bound.collect(&mut grads)?;
        drop(graph);
        let Generator { params, input, .. } = &mut gen;
        let input_target = gen_cfg
            .optimize_input
            .then_some((Generator::<T>::INPUT_KEY, input));
        adam.step_named(params.iter_mut().chain(input_target), &grads)?;
    }

    let final_image = gen.forward()?;
    if !final_image.is_finite() {
        return Err(Error::Divergence {
            step: cfg.steps,
            last_finite_step: last_finite,
        });
    }
    let final_snr = consider(&mut best, cfg.steps, &final_image)?;
    let (image, best, selected_best) = match best {
        Some((b, img)) if track => (img, Some(b), true),
        _ => (final_image.clone(), None, false),
    };
    Ok(Restoration {
        image,
        final_image,
        final_snr_db: final_snr,
        best,
        selected_best,
        trace,
        generator: gen,
    })
}
