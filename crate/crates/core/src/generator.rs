//! Untrained encoder–decoder generator `f_Θ(z)` with convolutional skips.
//!
//! Level `i` of the network sees features at `H / 2^i`:
//!
//! ```text
//! down:  conv(k_down, /2) → BN → LReLU → conv(k_down) → BN → LReLU
//! skip:  conv(k_skip) → BN → LReLU                    (on the level input, if n_s[i] > 0)
//! up:    BN(concat(skip, upsample(deeper))) → conv(k_up) → BN → LReLU → conv(1×1) → BN → LReLU
//! head:  conv(1×1) → sigmoid
//! ```

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Element, Gradients, Graph, PadMode, Tensor, UpsampleMode, Var};

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Denoise,
    Deblur,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub channels_down: Vec<usize>,
    pub channels_up: Vec<usize>,
    /// Feature maps per skip branch; 0 disables the branch at that level.
    pub skip_channels: Vec<usize>,
    pub kernel_down: usize,
    pub kernel_up: usize,
    pub kernel_skip: usize,
    pub upsample_mode: UpsampleMode,
    pub activation_slope: f64,
    pub input_channels: usize,
    /// `z` is drawn uniformly from `[0, input_amplitude]`.
    pub input_amplitude: f64,
    pub optimize_input: bool,
    pub output_channels: usize,
    #[serde(default = "default_pad")]
    pub pad: PadMode,
    pub seed: u64,
}

fn default_pad() -> PadMode {
    PadMode::Reflect
}

impl GeneratorConfig {
    /// Five levels of 128 filters; skips of 4 maps for denoising, 128 for deblurring.
    pub fn default_for(task: Task) -> Self {
        let skip = match task {
            Task::Denoise => 4,
            Task::Deblur => 128,
        };
        Self {
            depth: 5,
            channels_down: vec![128; 5],
            channels_up: vec![128; 5],
            skip_channels: vec![skip; 5],
            kernel_down: 3,
            kernel_up: 3,
            kernel_skip: 1,
            upsample_mode: UpsampleMode::Bilinear,
            activation_slope: 0.1,
            input_channels: 32,
            input_amplitude: 0.1,
            optimize_input: false,
            output_channels: 1,
            pad: PadMode::Reflect,
            seed: 0,
        }
    }

    /// Same width at every level.
    pub fn uniform(depth: usize, channels: usize, skip: usize) -> Self {
        Self {
            depth,
            channels_down: vec![channels; depth],
            channels_up: vec![channels; depth],
            skip_channels: vec![skip; depth],
            ..Self::default_for(Task::Denoise)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth >= 1, "generator depth must be at least 1");
        for (name, v) in [
            ("channels_down", &self.channels_down),
            ("channels_up", &self.channels_up),
            ("skip_channels", &self.skip_channels),
        ] {
            ensure!(
                v.len() == self.depth,
                "{name} has {} entries but depth is {}",
                v.len(),
                self.depth
            );
        }
        ensure!(
            self.channels_down.iter().all(|&c| c >= 1),
            "channels_down entries must be at least 1"
        );
        ensure!(
            self.channels_up.iter().all(|&c| c >= 1),
            "channels_up entries must be at least 1"
        );
        for (name, k) in [
            ("kernel_down", self.kernel_down),
            ("kernel_up", self.kernel_up),
            ("kernel_skip", self.kernel_skip),
        ] {
            ensure!(k % 2 == 1, "{name} must be odd, got {k}");
        }
        ensure!(
            self.activation_slope > 0.0 && self.activation_slope < 1.0,
            "activation_slope must lie in (0, 1)"
        );
        ensure!(self.input_channels >= 1, "input_channels must be at least 1");
        ensure!(
            self.input_amplitude > 0.0 && self.input_amplitude.is_finite(),
            "input_amplitude must be positive"
        );
        ensure!(
            self.output_channels == 1 || self.output_channels == 3,
            "output_channels must be 1 or 3, got {}",
            self.output_channels
        );
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Every parameter tensor as `(name, shape)`, in initialization order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Vec<usize>)>, name: String, cin, cout, k| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let bn = |out: &mut Vec<(String, Vec<usize>)>, name: String, c| {
            out.push((format!("{name}.gamma"), vec![c]));
            out.push((format!("{name}.beta"), vec![c]));
        };
        let mut level_in = self.input_channels;
        for i in 0..self.depth {
            let cd = self.channels_down[i];
            conv(&mut out, format!("down{i}.conv1"), level_in, cd, self.kernel_down);
            bn(&mut out, format!("down{i}.bn1"), cd);
            conv(&mut out, format!("down{i}.conv2"), cd, cd, self.kernel_down);
            bn(&mut out, format!("down{i}.bn2"), cd);
            let ns = self.skip_channels[i];
            if ns > 0 {
                conv(&mut out, format!("skip{i}.conv"), level_in, ns, self.kernel_skip);
                bn(&mut out, format!("skip{i}.bn"), ns);
            }
            let deeper = if i + 1 < self.depth {
                self.channels_up[i + 1]
            } else {
                cd
            };
            let cu = self.channels_up[i];
            bn(&mut out, format!("up{i}.bn0"), ns + deeper);
            conv(&mut out, format!("up{i}.conv1"), ns + deeper, cu, self.kernel_up);
            bn(&mut out, format!("up{i}.bn1"), cu);
            conv(&mut out, format!("up{i}.conv2"), cu, cu, 1);
            bn(&mut out, format!("up{i}.bn2"), cu);
            level_in = cd;
        }
        conv(&mut out, "head.conv".into(), self.channels_up[0], self.output_channels, 1);
        out
    }
}

/// Named parameter tensors Θ.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        ensure!(!self.params.contains_key(&name), "duplicate parameter {name}");
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed like a [`ParamStore`].
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

/// Graph handles for one forward evaluation.
pub struct Bound {
    pub output: Var,
    params: Vec<(String, Var)>,
    input: Option<Var>,
}

impl Bound {
    /// Extracts parameter gradients (and the input gradient under the key `"input"`
    /// when `z` is optimized).
    pub fn collect<T: Element>(&self, grads: &mut Gradients<T>) -> Result<GradMap<T>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.params {
            let g = grads
                .take(*var)
                .ok_or_else(|| Error::invalid(format!("no gradient reached {name}")))?;
            out.insert(name.clone(), g);
        }
        if let Some(v) = self.input {
            let g = grads
                .take(v)
                .ok_or_else(|| Error::invalid("no gradient reached the input"))?;
            out.insert(Generator::<T>::INPUT_KEY.to_string(), g);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    /// Fixed random input `z`, shape `1 × input_channels × H × W`.
    pub input: Tensor<T>,
}

impl<T: Element> Generator<T> {
    pub const INPUT_KEY: &'static str = "input";

    pub fn build(config: &GeneratorConfig, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        let m = config.size_multiple();
        ensure!(
            height % m == 0 && width % m == 0 && height > 0 && width > 0,
            "image size {height}x{width} must be a positive multiple of {m} for depth {}",
            config.depth
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let amp = config.input_amplitude;
        let input = Tensor::from_fn(&[1, config.input_channels, height, width], |_| {
            T::of(rng.random::<f64>() * amp)
        });
        let mut params = ParamStore::new();
        for (name, shape) in config.layout() {
            let t = if name.ends_with(".gamma") {
                Tensor::full(&shape, T::one())
            } else if name.ends_with(".beta") {
                Tensor::zeros(&shape)
            } else {
                // Fan-in scaled uniform; biases share their weight's bound.
                let fan_in: usize = if name.ends_with(".weight") {
                    shape[1..].iter().product()
                } else {
                    let wname = name.replace(".bias", ".weight");
                    let ws = params
                        .get(&wname)
                        .map(|w: &Tensor<T>| w.shape().to_vec())
                        .expect("weight precedes bias");
                    ws[1..].iter().product()
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::of(rng.random_range(-bound..bound)))
            };
            params.insert(name, t)?;
        }
        Ok(Self {
            config: config.clone(),
            params,
            input,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        let s = self.input.shape();
        [1, self.config.output_channels, s[2], s[3]]
    }

    /// Records `f_Θ(z)` on `graph`. Parameters become tracked leaves; `z` is
    /// tracked only when `optimize_input` is set.
    pub fn forward_on(&self, graph: &mut Graph<T>) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        let mut bound = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let v = graph.param(t.clone());
            vars.insert(name.to_string(), v);
            bound.push((name.to_string(), v));
        }
        let z = if self.config.optimize_input {
            graph.param(self.input.clone())
        } else {
            graph.constant(self.input.clone())
        };
        let net = Net {
            cfg: &self.config,
            vars: &vars,
        };
        let features = net.level(graph, 0, z)?;
        let head = net.conv(graph, features, "head.conv", 1)?;
        let output = graph.sigmoid(head);
        Ok(Bound {
            output,
            params: bound,
            input: self.config.optimize_input.then_some(z),
        })
    }

    /// Evaluates `f_Θ(z)` without keeping the graph.
    pub fn forward(&self) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.forward_on(&mut g)?;
        Ok(g.value(b.output).clone())
    }
}

struct Net<'a> {
    cfg: &'a GeneratorConfig,
    vars: &'a BTreeMap<String, Var>,
}

impl Net<'_> {
    fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn conv<T: Element>(&self, g: &mut Graph<T>, x: Var, name: &str, stride: usize) -> Result<Var> {
        g.conv2d(
            x,
            self.var(&format!("{name}.weight")),
            Some(self.var(&format!("{name}.bias"))),
            stride,
            self.cfg.pad,
        )
    }

    fn bn<T: Element>(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        g.batch_norm(
            x,
            self.var(&format!("{name}.gamma")),
            self.var(&format!("{name}.beta")),
            BN_EPS,
        )
    }

    /// conv → BN → leaky ReLU
    fn block<T: Element>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        conv: &str,
        bn: &str,
        stride: usize,
    ) -> Result<Var> {
        let c = self.conv(g, x, conv, stride)?;
        let n = self.bn(g, c, bn)?;
        g.leaky_relu(n, self.cfg.activation_slope)
    }

    /// Output of up block `i` given the level input `x` at resolution `H / 2^i`.
    fn level<T: Element>(&self, g: &mut Graph<T>, i: usize, x: Var) -> Result<Var> {
        let d = self.block(g, x, &format!("down{i}.conv1"), &format!("down{i}.bn1"), 2)?;
        let d = self.block(g, d, &format!("down{i}.conv2"), &format!("down{i}.bn2"), 1)?;
        let deeper = if i + 1 < self.cfg.depth {
            self.level(g, i + 1, d)?
        } else {
            d
        };
        let up = g.upsample(deeper, 2, self.cfg.upsample_mode)?;
        let merged = if self.cfg.skip_channels[i] > 0 {
            let s = self.block(g, x, &format!("skip{i}.conv"), &format!("skip{i}.bn"), 1)?;
            g.concat_channels(&[s, up])?
        } else {
            up
        };
        let m = self.bn(g, merged, &format!("up{i}.bn0"))?;
        let u = self.block(g, m, &format!("up{i}.conv1"), &format!("up{i}.bn1"), 1)?;
        self.block(g, u, &format!("up{i}.conv2"), &format!("up{i}.bn2"), 1)
    }
}
