use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{ensure, Result};

/// Border handling for "same" padding of `(k - 1) / 2` on each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample (`-1 -> 1`). Folds repeatedly
    /// when the pad exceeds the axis; a length-1 axis degenerates to replicate.
    Reflect,
    Replicate,
}

impl PadMode {
    /// Source index of the (possibly out-of-range) coordinate `i` on an axis of length `n`.
    pub(crate) fn source(self, i: isize, n: usize) -> Option<usize> {
        let n = n as isize;
        if (0..n).contains(&i) {
            return Some(i as usize);
        }
        match self {
            PadMode::Zero => None,
            PadMode::Replicate => Some(i.clamp(0, n - 1) as usize),
            PadMode::Reflect => {
                if n == 1 {
                    return Some(0);
                }
                let period = 2 * (n - 1);
                let mut r = i.rem_euclid(period);
                if r >= n {
                    r = period - r;
                }
                Some(r as usize)
            }
        }
    }
}

/// Geometry of one conv2d call, shared by forward and backward.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub hout: usize,
    pub wout: usize,
    /// Per (output row, kernel row): source row, for every `oy * kh + a`.
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        pad: PadMode,
    ) -> Result<Self> {
        let [batch, cin, h, w] = *input else {
            return Err(crate::Error::invalid(format!(
                "conv2d input must be 4-D, got {input:?}"
            )));
        };
        let [cout, wcin, kh, kw] = *weight else {
            return Err(crate::Error::invalid(format!(
                "conv2d weight must be 4-D, got {weight:?}"
            )));
        };
        ensure!(
            wcin == cin,
            "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
        );
        ensure!(kh % 2 == 1 && kw % 2 == 1, "conv2d kernel must be odd, got {kh}x{kw}");
        ensure!(stride == 1 || stride == 2, "conv2d stride must be 1 or 2, got {stride}");
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        ensure!(
            h + 2 * ph >= kh && w + 2 * pw >= kw,
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * ph,
            w + 2 * pw
        );
        let hout = (h + 2 * ph - kh) / stride + 1;
        let wout = (w + 2 * pw - kw) / stride + 1;
        let axis_map = |out: usize, k: usize, p: usize, n: usize| {
            let mut map = Vec::with_capacity(out * k);
            for o in 0..out {
                for a in 0..k {
                    map.push(pad.source((o * stride + a) as isize - p as isize, n));
                }
            }
            map
        };
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            hout,
            wout,
            rows: axis_map(hout, kh, ph, h),
            cols: axis_map(wout, kw, pw, w),
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.hout * self.wout
    }

    /// Unfolds batch item `x` (cin × h × w) into a `patch_len × out_pixels` matrix.
    pub fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let p = self.out_pixels();
        let plane = self.h * self.w;
        for ci in 0..self.cin {
            let src = &x[ci * plane..(ci + 1) * plane];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = ((ci * self.kh + a) * self.kw + b) * p;
                    let dst = &mut cols[row..row + p];
                    for oy in 0..self.hout {
                        let out_row = &mut dst[oy * self.wout..(oy + 1) * self.wout];
                        match self.rows[oy * self.kh + a] {
                            None => out_row.fill(T::zero()),
                            Some(sy) => {
                                let line = &src[sy * self.w..(sy + 1) * self.w];
                                for (ox, o) in out_row.iter_mut().enumerate() {
                                    *o = match self.cols[ox * self.kw + b] {
                                        Some(sx) => line[sx],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients back onto `dx`.
    pub fn col2im<T: Element>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.out_pixels();
        let plane = self.h * self.w;
        for ci in 0..self.cin {
            let dst = &mut dx[ci * plane..(ci + 1) * plane];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = ((ci * self.kh + a) * self.kw + b) * p;
                    let src = &cols[row..row + p];
                    for oy in 0..self.hout {
                        let Some(sy) = self.rows[oy * self.kh + a] else {
                            continue;
                        };
                        let line = &mut dst[sy * self.w..(sy + 1) * self.w];
                        let grads = &src[oy * self.wout..(oy + 1) * self.wout];
                        for (ox, &g) in grads.iter().enumerate() {
                            if let Some(sx) = self.cols[ox * self.kw + b] {
                                line[sx] = line[sx] + g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation. Returns the output and the unfolded input
/// (one `patch_len × out_pixels` block per batch item) for the backward pass.
pub(crate) fn conv2d_forward<T: Element>(
    geom: &ConvGeom,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> (Tensor<T>, Vec<T>) {
    let (k, p) = (geom.patch_len(), geom.out_pixels());
    let in_item = geom.cin * geom.h * geom.w;
    let out_item = geom.cout * p;
    let mut cols = vec![T::zero(); geom.batch * k * p];
    let mut out = vec![T::zero(); geom.batch * out_item];
    for b in 0..geom.batch {
        let col = &mut cols[b * k * p..(b + 1) * k * p];
        geom.im2col(&x.data()[b * in_item..(b + 1) * in_item], col);
        let y = &mut out[b * out_item..(b + 1) * out_item];
        if let Some(bias) = bias {
            for (co, chunk) in y.chunks_mut(p).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            geom.cout,
            k,
            p,
            T::one(),
            weight.data(),
            k as isize,
            1,
            col,
            p as isize,
            1,
            beta,
            y,
            p as isize,
            1,
        );
    }
    let shape = vec![geom.batch, geom.cout, geom.hout, geom.wout];
    (Tensor::from_parts(shape, out), cols)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    geom: &ConvGeom,
    cols: &[T],
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    want: [bool; 3],
) -> ConvGrads<T> {
    let (k, p) = (geom.patch_len(), geom.out_pixels());
    let in_item = geom.cin * geom.h * geom.w;
    let out_item = geom.cout * p;
    let [want_x, want_w, want_b] = want;

    let mut dx = want_x.then(|| vec![T::zero(); geom.batch * in_item]);
    let mut dw = want_w.then(|| vec![T::zero(); geom.cout * k]);
    let mut db = want_b.then(|| vec![T::zero(); geom.cout]);
    let mut dcols = want_x.then(|| vec![T::zero(); k * p]);

    for b in 0..geom.batch {
        let g = &grad_out.data()[b * out_item..(b + 1) * out_item];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in g.chunks(p).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let col = &cols[b * k * p..(b + 1) * k * p];
            // dW += dY · colsᵀ
            T::gemm(
                geom.cout,
                p,
                k,
                T::one(),
                g,
                p as isize,
                1,
                col,
                1,
                p as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
        }
        if let (Some(dx), Some(dcols)) = (dx.as_mut(), dcols.as_mut()) {
            // dcols = Wᵀ · dY
            T::gemm(
                k,
                geom.cout,
                p,
                T::one(),
                weight.data(),
                1,
                k as isize,
                g,
                p as isize,
                1,
                T::zero(),
                dcols,
                p as isize,
                1,
            );
            geom.col2im(dcols, &mut dx[b * in_item..(b + 1) * in_item]);
        }
    }
    ConvGrads {
        input: dx.map(|d| {
            Tensor::from_parts(vec![geom.batch, geom.cin, geom.h, geom.w], d)
        }),
        weight: dw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
        bias: db.map(|d| Tensor::from_parts(vec![geom.cout], d)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_folds_and_replicate_clamps() {
        let r: Vec<_> = (-3..6).map(|i| PadMode::Reflect.source(i, 3).unwrap()).collect();
        assert_eq!(r, vec![1, 2, 1, 0, 1, 2, 1, 0, 1]);
        assert_eq!(PadMode::Reflect.source(-1, 1), Some(0));
        assert_eq!(PadMode::Replicate.source(-4, 3), Some(0));
        assert_eq!(PadMode::Replicate.source(7, 3), Some(2));
        assert_eq!(PadMode::Zero.source(-1, 3), None);
    }

    #[test]
    fn stride_two_halves_even_sizes() {
        let g = ConvGeom::new(&[1, 2, 8, 6], &[3, 2, 3, 3], 2, PadMode::Reflect).unwrap();
        assert_eq!((g.hout, g.wout), (4, 3));
        let g = ConvGeom::new(&[1, 2, 8, 6], &[3, 2, 5, 1], 1, PadMode::Zero).unwrap();
        assert_eq!((g.hout, g.wout), (8, 6));
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(ConvGeom::new(&[1, 2, 8, 8], &[3, 1, 3, 3], 1, PadMode::Zero).is_err());
        assert!(ConvGeom::new(&[1, 2, 8, 8], &[3, 2, 2, 3], 1, PadMode::Zero).is_err());
        assert!(ConvGeom::new(&[1, 2, 8, 8], &[3, 2, 3, 3], 3, PadMode::Zero).is_err());
        assert!(ConvGeom::new(&[2, 8, 8], &[3, 2, 3, 3], 1, PadMode::Zero).is_err());
    }
}
