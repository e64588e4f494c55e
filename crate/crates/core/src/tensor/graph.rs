use std::collections::HashMap;
use std::sync::Arc;

use super::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use super::kernels::{
    batch_norm_backward, batch_norm_forward, upsample_backward, upsample_forward, Broadcast,
    NormStats,
};
use super::{Element, PadMode, Tensor, UpsampleMode};
use crate::error::{ensure, Error, Result};

/// A linear map with an exact adjoint, usable as a graph primitive.
pub trait LinearOperator<T: Element>: Send + Sync {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T: Element> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Upsample {
        input: Var,
        factor: usize,
        mode: UpsampleMode,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
        bl: Broadcast,
        br: Broadcast,
    },
    Sub {
        lhs: Var,
        rhs: Var,
        bl: Broadcast,
        br: Broadcast,
    },
    Mul {
        lhs: Var,
        rhs: Var,
        bl: Broadcast,
        br: Broadcast,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    SqL2 {
        input: Var,
    },
    Charbonnier {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Linear {
        input: Var,
        op: Arc<dyn LinearOperator<T>>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    /// True when some tracked leaf reaches this node.
    needs_grad: bool,
    tracked_leaf: bool,
}

/// Append-only record of executed primitives. Inputs always precede the
/// nodes that consume them, so a reverse sweep is a topological order.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every tracked leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Leaf whose gradient is reported by [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: tracked,
            tracked_leaf: tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            tracked_leaf: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Cross-correlation with "same" padding `(k - 1) / 2` per axis.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: PadMode,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input).shape(), self.value(weight).shape(), stride, pad)?;
        if let Some(b) = bias {
            ensure!(
                self.value(b).shape() == [geom.cout],
                "conv2d bias must have shape [{}], got {:?}",
                geom.cout,
                self.value(b).shape()
            );
        }
        let (out, mut cols) = conv2d_forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        if !self.needs(weight) {
            // Unfolded input is only needed for the weight gradient.
            cols = Vec::new();
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    pub fn upsample(&mut self, input: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        ensure!(factor >= 2, "upsample factor must be at least 2, got {factor}");
        self.value(input).dims4()?;
        let out = upsample_forward(self.value(input), factor, mode);
        Ok(self.push(
            out,
            Op::Upsample {
                input,
                factor,
                mode,
            },
            &[input],
        ))
    }

    /// Training-mode batch normalization over batch and spatial axes.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        ensure!(eps > 0.0, "batch_norm eps must be positive, got {eps}");
        let (_, c, _, _) = self.value(input).dims4()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            ensure!(
                self.value(v).shape() == [c],
                "batch_norm {name} must have shape [{c}], got {:?}",
                self.value(v).shape()
            );
        }
        let (out, stats) =
            batch_norm_forward(self.value(input), self.value(gamma), self.value(beta), eps);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                stats,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        ensure!(
            slope > 0.0 && slope < 1.0,
            "leaky_relu slope must lie in (0, 1), got {slope}"
        );
        let slope = T::of(slope);
        let out = self
            .value(input)
            .map(|v| if v > T::zero() { v } else { slope * v });
        Ok(self.push(out, Op::LeakyRelu { input, slope }, &[input]))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(out, Op::Sigmoid { input }, &[input])
    }

    fn broadcast_pair(&self, lhs: Var, rhs: Var) -> Result<(Vec<usize>, Broadcast, Broadcast)> {
        let (ls, rs) = (self.value(lhs).shape(), self.value(rhs).shape());
        let (big, small_is_rhs) = if ls.iter().product::<usize>() >= rs.iter().product::<usize>() {
            (ls, true)
        } else {
            (rs, false)
        };
        let small = if small_is_rhs { rs } else { ls };
        let b = Broadcast::resolve(big, small)
            .ok_or_else(|| Error::invalid(format!("cannot broadcast {ls:?} with {rs:?}")))?;
        Ok(if small_is_rhs {
            (big.to_vec(), Broadcast::Same, b)
        } else {
            (big.to_vec(), b, Broadcast::Same)
        })
    }

    fn binary(&self, lhs: Var, rhs: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Broadcast, Broadcast)> {
        let (shape, bl, br) = self.broadcast_pair(lhs, rhs)?;
        let (l, r) = (self.value(lhs).data(), self.value(rhs).data());
        let n = shape.iter().product();
        let data = (0..n).map(|i| f(l[bl.index(i)], r[br.index(i)])).collect();
        Ok((Tensor::from_parts(shape, data), bl, br))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (out, bl, br) = self.binary(lhs, rhs, |a, b| a + b)?;
        Ok(self.push(out, Op::Add { lhs, rhs, bl, br }, &[lhs, rhs]))
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (out, bl, br) = self.binary(lhs, rhs, |a, b| a - b)?;
        Ok(self.push(out, Op::Sub { lhs, rhs, bl, br }, &[lhs, rhs]))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (out, bl, br) = self.binary(lhs, rhs, |a, b| a * b)?;
        Ok(self.push(out, Op::Mul { lhs, rhs, bl, br }, &[lhs, rhs]))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let factor = T::of(factor);
        let out = self.value(input).map(|v| v * factor);
        self.push(out, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    /// `Σ x²`.
    pub fn sq_l2(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SqL2 { input }, &[input])
    }

    /// Elementwise `√(x² + eps²)`; with `eps = 0` this is `|x|` with subgradient sign(0) = 0.
    pub fn charbonnier_abs(&mut self, input: Var, eps: f64) -> Result<Var> {
        ensure!(eps >= 0.0, "charbonnier eps must be non-negative, got {eps}");
        let e2 = T::of(eps * eps);
        let out = self.value(input).map(|v| (v * v + e2).sqrt());
        Ok(self.push(out, Op::Charbonnier { input }, &[input]))
    }

    /// Concatenation along the channel axis of 4-D tensors.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        ensure!(!inputs.is_empty(), "concat of zero tensors");
        let (b, _, h, w) = self.value(inputs[0]).dims4()?;
        let mut total = 0;
        for &v in inputs {
            let (vb, vc, vh, vw) = self.value(v).dims4()?;
            ensure!(
                (vb, vh, vw) == (b, h, w),
                "concat shape mismatch: {:?} vs {:?}",
                self.value(inputs[0]).shape(),
                self.value(v).shape()
            );
            total += vc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for &v in inputs {
                let t = self.value(v);
                let item = t.shape()[1] * hw;
                data.extend_from_slice(&t.data()[bi * item..(bi + 1) * item]);
            }
        }
        let out = Tensor::from_parts(vec![b, total, h, w], data);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    /// Applies a linear operator; its adjoint supplies the backward pass.
    pub fn linear(&mut self, input: Var, op: Arc<dyn LinearOperator<T>>) -> Result<Var> {
        let out = op.apply(self.value(input))?;
        Ok(self.push(out, Op::Linear { input, op }, &[input]))
    }

    /// Reverse sweep from a scalar `loss`, summing contributions over all paths.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(
            self.value(loss).len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = HashMap::new();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if node.tracked_leaf {
                out.insert(Var(id), g);
                continue;
            }
            for (v, dv) in self.node_backward(node, &g)? {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dv),
                    slot => *slot = Some(dv),
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let want = [
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                ];
                let grads = conv2d_backward(geom, cols, self.value(*weight), g, want);
                res.extend(grads.input.map(|t| (*input, t)));
                res.extend(grads.weight.map(|t| (*weight, t)));
                if let (Some(b), Some(t)) = (bias, grads.bias) {
                    res.push((*b, t));
                }
            }
            Op::Upsample {
                input,
                factor,
                mode,
            } => {
                let shape = self.value(*input).shape();
                res.push((*input, upsample_backward(shape, g, *factor, *mode)));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                stats,
            } => {
                let (dx, dg, db) = batch_norm_backward(stats, self.value(*gamma), g);
                res.push((*input, dx));
                res.push((*gamma, dg));
                res.push((*beta, db));
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input);
                let dx = x.zip_map(g, |v, gv| if v > T::zero() { gv } else { *slope * gv })?;
                res.push((*input, dx));
            }
            Op::Sigmoid { input } => {
                let dx = node
                    .value
                    .zip_map(g, |s, gv| gv * s * (T::one() - s))?;
                res.push((*input, dx));
            }
            Op::Add { lhs, rhs, bl, br } | Op::Sub { lhs, rhs, bl, br } => {
                let neg = matches!(node.op, Op::Sub { .. });
                res.push((*lhs, bl.reduce(g.data(), self.value(*lhs).shape())));
                let mut dr = br.reduce(g.data(), self.value(*rhs).shape());
                if neg {
                    dr = dr.map(|v| -v);
                }
                res.push((*rhs, dr));
            }
            Op::Mul { lhs, rhs, bl, br } => {
                let (l, r) = (self.value(*lhs).data(), self.value(*rhs).data());
                let gl: Vec<T> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * r[br.index(i)])
                    .collect();
                let gr: Vec<T> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * l[bl.index(i)])
                    .collect();
                res.push((*lhs, bl.reduce(&gl, self.value(*lhs).shape())));
                res.push((*rhs, br.reduce(&gr, self.value(*rhs).shape())));
            }
            Op::Scale { input, factor } => {
                res.push((*input, g.map(|v| v * *factor)));
            }
            Op::Sum { input } => {
                let gv = g.item();
                res.push((*input, Tensor::full(self.value(*input).shape(), gv)));
            }
            Op::SqL2 { input } => {
                let two_g = (T::one() + T::one()) * g.item();
                res.push((*input, self.value(*input).map(|v| two_g * v)));
            }
            Op::Charbonnier { input } => {
                let x = self.value(*input);
                let mut dx = x.zip_map(&node.value, |v, y| {
                    if y > T::zero() {
                        v / y
                    } else {
                        T::zero()
                    }
                })?;
                for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                    *d = *d * gv;
                }
                res.push((*input, dx));
            }
            Op::Concat { inputs } => {
                let (b, total, h, w) = g.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let shape = self.value(v).shape().to_vec();
                    let c = shape[1];
                    let mut data = Vec::with_capacity(b * c * hw);
                    for bi in 0..b {
                        let start = (bi * total + offset) * hw;
                        data.extend_from_slice(&g.data()[start..start + c * hw]);
                    }
                    offset += c;
                    res.push((v, Tensor::from_parts(shape, data)));
                }
            }
            Op::Linear { input, op } => {
                res.push((*input, op.adjoint(g)?));
            }
        }
        Ok(res)
    }
}
