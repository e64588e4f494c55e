use serde::{Deserialize, Serialize};

use super::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// One output coordinate of a 1-D resampling: `w0 * x[i0] + w1 * x[i1]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

pub(crate) fn upsample_taps(n: usize, factor: usize, mode: UpsampleMode) -> Vec<Tap> {
    (0..n * factor)
        .map(|o| match mode {
            UpsampleMode::Nearest => Tap {
                i0: o / factor,
                i1: o / factor,
                w0: 1.0,
                w1: 0.0,
            },
            UpsampleMode::Bilinear => {
                // Half-pixel centers; coordinates left of the first sample clamp to it.
                let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                let w1 = src - i0 as f64;
                Tap {
                    i0,
                    i1,
                    w0: 1.0 - w1,
                    w1,
                }
            }
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Element>(
    x: &Tensor<T>,
    factor: usize,
    mode: UpsampleMode,
) -> Tensor<T> {
    let (b, c, h, w) = x.dims4().expect("checked by caller");
    let (ho, wo) = (h * factor, w * factor);
    let ty = upsample_taps(h, factor, mode);
    let tx = upsample_taps(w, factor, mode);
    let mut out = vec![T::zero(); b * c * ho * wo];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for (oy, t) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(t.w0), T::of(t.w1));
            let r0 = &plane[t.i0 * w..(t.i0 + 1) * w];
            let r1 = &plane[t.i1 * w..(t.i1 + 1) * w];
            for (ox, s) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(s.w0), T::of(s.w1));
                let top = wx0 * r0[s.i0] + wx1 * r0[s.i1];
                let bot = wx0 * r1[s.i0] + wx1 * r1[s.i1];
                dst[oy * wo + ox] = wy0 * top + wy1 * bot;
            }
        }
    }
    Tensor::from_parts(vec![b, c, ho, wo], out)
}

pub(crate) fn upsample_backward<T: Element>(
    in_shape: &[usize],
    grad: &Tensor<T>,
    factor: usize,
    mode: UpsampleMode,
) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let ty = upsample_taps(h, factor, mode);
    let tx = upsample_taps(w, factor, mode);
    let mut dx = vec![T::zero(); in_shape.iter().product()];
    for (g, dst) in grad.data().chunks(ho * wo).zip(dx.chunks_mut(h * w)) {
        for (oy, t) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(t.w0), T::of(t.w1));
            for (ox, s) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(s.w0), T::of(s.w1));
                let gv = g[oy * wo + ox];
                let top = wy0 * gv;
                let bot = wy1 * gv;
                dst[t.i0 * w + s.i0] = dst[t.i0 * w + s.i0] + wx0 * top;
                dst[t.i0 * w + s.i1] = dst[t.i0 * w + s.i1] + wx1 * top;
                dst[t.i1 * w + s.i0] = dst[t.i1 * w + s.i0] + wx0 * bot;
                dst[t.i1 * w + s.i1] = dst[t.i1 * w + s.i1] + wx1 * bot;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Saved statistics of a training-mode batch norm.
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Visits every `(channel, plane)` slice of a B×C×H×W buffer.
fn channel_planes<T>(data: &[T], c: usize, hw: usize) -> impl Iterator<Item = (usize, &[T])> {
    data.chunks(hw).enumerate().map(move |(i, p)| (i % c, p))
}

pub(crate) fn batch_norm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, NormStats<T>) {
    let (b, c, h, w) = x.dims4().expect("checked by caller");
    let hw = h * w;
    let n = (b * hw) as f64;
    // Two-pass statistics in f64 for stability at f32 storage.
    let mut mean = vec![0.0f64; c];
    for (ch, plane) in channel_planes(x.data(), c, hw) {
        mean[ch] += plane.iter().map(|v| v.f64()).sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; c];
    for (ch, plane) in channel_planes(x.data(), c, hw) {
        var[ch] += plane
            .iter()
            .map(|v| (v.f64() - mean[ch]).powi(2))
            .sum::<f64>();
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v / n + eps).sqrt())).collect();
    let mean: Vec<T> = mean.into_iter().map(T::of).collect();

    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for (ch, plane) in channel_planes(x.data(), c, hw) {
        let (m, s, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
        for &v in plane {
            let xh = (v - m) * s;
            xhat.push(xh);
            y.push(g * xh + bt);
        }
    }
    let shape = x.shape().to_vec();
    (
        Tensor::from_parts(shape.clone(), y),
        NormStats {
            xhat: Tensor::from_parts(shape, xhat),
            inv_std,
        },
    )
}

/// Returns `(d input, d gamma, d beta)`.
pub(crate) fn batch_norm_backward<T: Element>(
    stats: &NormStats<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c, h, w) = grad.dims4().expect("same shape as input");
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for ((ch, g), (_, xh)) in
        channel_planes(grad.data(), c, hw).zip(channel_planes(stats.xhat.data(), c, hw))
    {
        for (&gv, &xv) in g.iter().zip(xh) {
            sum_g[ch] += gv.f64();
            sum_gx[ch] += gv.f64() * xv.f64();
        }
    }
    let mut dx = Vec::with_capacity(grad.len());
    for ((ch, g), (_, xh)) in
        channel_planes(grad.data(), c, hw).zip(channel_planes(stats.xhat.data(), c, hw))
    {
        let scale = gamma.data()[ch] * stats.inv_std[ch];
        let mg = T::of(sum_g[ch] / n);
        let mgx = T::of(sum_gx[ch] / n);
        for (&gv, &xv) in g.iter().zip(xh) {
            dx.push(scale * (gv - mg - xv * mgx));
        }
    }
    let dgamma = sum_gx.into_iter().map(T::of).collect();
    let dbeta = sum_g.into_iter().map(T::of).collect();
    (
        Tensor::from_parts(grad.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// How the second operand of a binary op lines up with the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// One operand is a single value.
    Scalar,
    /// One operand is `[C]` against `[B, C, H, W]`; `hw` is the plane size.
    Channel { c: usize, hw: usize },
}

impl Broadcast {
    /// Works out how `small` maps onto `big`, if at all.
    pub fn resolve(big: &[usize], small: &[usize]) -> Option<Self> {
        if big == small {
            Some(Broadcast::Same)
        } else if small.iter().product::<usize>() == 1 {
            Some(Broadcast::Scalar)
        } else if let ([_, c, h, w], [sc]) = (big, small) {
            (c == sc).then_some(Broadcast::Channel { c: *c, hw: h * w })
        } else {
            None
        }
    }

    #[inline]
    pub fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Channel { c, hw } => (i / hw) % c,
        }
    }

    /// Sums a full-size gradient down to the small operand's shape.
    pub fn reduce<T: Element>(self, grad: &[T], small: &[usize]) -> Tensor<T> {
        if self == Broadcast::Same {
            return Tensor::from_parts(small.to_vec(), grad.to_vec());
        }
        let mut out = vec![T::zero(); small.iter().product()];
        for (i, &g) in grad.iter().enumerate() {
            let j = self.index(i);
            out[j] = out[j] + g;
        }
        Tensor::from_parts(small.to_vec(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_taps_use_half_pixel_centers() {
        let t = upsample_taps(2, 2, UpsampleMode::Bilinear);
        // output 0 -> src -0.25 clamped to 0; output 1 -> 0.25; 2 -> 0.75; 3 -> 1.25 -> (1,1)
        assert_eq!((t[0].i0, t[0].w1), (0, 0.0));
        assert_eq!((t[1].i0, t[1].i1, t[1].w1), (0, 1, 0.25));
        assert_eq!((t[2].i0, t[2].i1, t[2].w1), (0, 1, 0.75));
        assert_eq!((t[3].i0, t[3].i1), (1, 1));
    }

    #[test]
    fn broadcast_resolution() {
        assert_eq!(Broadcast::resolve(&[2, 3], &[2, 3]), Some(Broadcast::Same));
        assert_eq!(Broadcast::resolve(&[2, 3], &[1]), Some(Broadcast::Scalar));
        assert_eq!(
            Broadcast::resolve(&[1, 3, 2, 2], &[3]),
            Some(Broadcast::Channel { c: 3, hw: 4 })
        );
        assert_eq!(Broadcast::resolve(&[1, 3, 2, 2], &[2]), None);
        assert_eq!(Broadcast::resolve(&[2, 3], &[3, 2]), None);
    }
}
