//! 8-bit image files, working-tensor conversion, and size padding.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Gray,
    Rgb,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Gray => 1,
            ColorSpace::Rgb => 3,
        }
    }
}

/// Interleaved H×W×C 8-bit samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageFile {
    pub width: usize,
    pub height: usize,
    pub colorspace: ColorSpace,
    pub pixels: Vec<u8>,
}

impl ImageFile {
    /// Reads PNG (gray or RGB) or binary PGM. Alpha is dropped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })?;
        Ok(Self::from_dynamic(img, path))
    }

    fn from_dynamic(img: DynamicImage, path: &Path) -> Self {
        let (width, height) = (img.width() as usize, img.height() as usize);
        match img {
            DynamicImage::ImageLuma8(g) => Self {
                width,
                height,
                colorspace: ColorSpace::Gray,
                pixels: g.into_raw(),
            },
            DynamicImage::ImageRgb8(c) => Self {
                width,
                height,
                colorspace: ColorSpace::Rgb,
                pixels: c.into_raw(),
            },
            other => {
                let gray = !other.color().has_color();
                log::warn!(
                    "{}: converting {:?} to 8-bit {}",
                    path.display(),
                    other.color(),
                    if gray { "gray" } else { "RGB" }
                );
                if gray {
                    Self::from_dynamic(DynamicImage::ImageLuma8(other.to_luma8()), path)
                } else {
                    Self::from_dynamic(DynamicImage::ImageRgb8(other.to_rgb8()), path)
                }
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (w, h) = (self.width as u32, self.height as u32);
        let img = match self.colorspace {
            ColorSpace::Gray => DynamicImage::ImageLuma8(
                GrayImage::from_raw(w, h, self.pixels.clone()).expect("consistent buffer"),
            ),
            ColorSpace::Rgb => DynamicImage::ImageRgb8(
                RgbImage::from_raw(w, h, self.pixels.clone()).expect("consistent buffer"),
            ),
        };
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| match source {
                image::ImageError::IoError(e) => Error::io(path, e),
                source => Error::Image {
                    path: path.to_path_buf(),
                    source,
                },
            })
    }

    pub fn channels(&self) -> usize {
        self.colorspace.channels()
    }

    /// `1 × C × H × W` tensor scaled by `scale / 255` (use 1 for [0, 1], 255 for [0, 255]).
    pub fn to_tensor<T: Element>(&self, scale: f64) -> Tensor<T> {
        let (c, h, w) = (self.channels(), self.height, self.width);
        let factor = scale / 255.0;
        Tensor::from_fn(&[1, c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            T::of(self.pixels[p * c + ch] as f64 * factor)
        })
    }

    /// Inverse of [`to_tensor`](Self::to_tensor): multiplies by `255 / scale`,
    /// clamps to [0, 255] and rounds half to even.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, scale: f64) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        ensure!(b == 1, "expected a single image, got batch {b}");
        let colorspace = match c {
            1 => ColorSpace::Gray,
            3 => ColorSpace::Rgb,
            _ => return Err(Error::invalid(format!("cannot save a {c}-channel image"))),
        };
        let factor = 255.0 / scale;
        let mut pixels = vec![0u8; c * h * w];
        for (i, v) in t.data().iter().enumerate() {
            let (ch, p) = (i / (h * w), i % (h * w));
            let v = v.f64() * factor;
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 255.0) };
            pixels[p * c + ch] = v.round_ties_even() as u8;
        }
        Ok(Self {
            width: w,
            height: h,
            colorspace,
            pixels,
        })
    }
}

/// Replicate-pads the bottom and right edges so both sizes become multiples of `m`.
pub fn pad_to_multiple<T: Element>(t: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = t.dims4()?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let src = t.data();
    Ok(Tensor::from_fn(&[b, c, ph, pw], |i| {
        let plane = i / (ph * pw);
        let (y, x) = ((i / pw) % ph, i % pw);
        src[plane * h * w + y.min(h - 1) * w + x.min(w - 1)]
    }))
}

/// Top-left `h × w` window.
pub fn crop<T: Element>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (b, c, th, tw) = t.dims4()?;
    ensure!(h <= th && w <= tw, "crop {h}x{w} exceeds {th}x{tw}");
    let src = t.data();
    Ok(Tensor::from_fn(&[b, c, h, w], |i| {
        let plane = i / (h * w);
        let (y, x) = ((i / w) % h, i % w);
        src[plane * th * tw + y * tw + x]
    }))
}

/// Piecewise-constant gray test image: background, a bright disc, a dark
/// rectangle, and a mid-gray triangle.
pub fn phantom(size: usize) -> ImageFile {
    let s = size as f64;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let mut v = 60u8;
            if (0.12..0.45).contains(&fx) && (0.55..0.88).contains(&fy) {
                v = 20;
            }
            if (fx - 0.62).powi(2) + (fy - 0.35).powi(2) < 0.22f64.powi(2) {
                v = 210;
            }
            // triangle with vertices (0.55,0.9) (0.92,0.9) (0.92,0.55)
            if fy < 0.9 && fx < 0.92 && fx > 0.55 && (fy - 0.9) > -(fx - 0.55) * (0.35 / 0.37) {
                v = 140;
            }
            pixels.push(v);
        }
    }
    ImageFile {
        width: size,
        height: size,
        colorspace: ColorSpace::Gray,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_lossless() {
        let img = ImageFile {
            width: 16,
            height: 16,
            colorspace: ColorSpace::Rgb,
            pixels: (0..768).map(|i| (i % 256) as u8).collect(),
        };
        let t: Tensor<f32> = img.to_tensor(1.0);
        assert_eq!(t.shape(), &[1, 3, 16, 16]);
        assert_eq!(ImageFile::from_tensor(&t, 1.0).unwrap(), img);
        let t: Tensor<f64> = img.to_tensor(255.0);
        assert_eq!(ImageFile::from_tensor(&t, 255.0).unwrap(), img);
    }

    #[test]
    fn saving_clamps_and_rounds_half_even() {
        let t = Tensor::new(&[1, 1, 1, 4], vec![-3.0f64, 2.5, 3.5, 300.0]).unwrap();
        let img = ImageFile::from_tensor(&t, 255.0).unwrap();
        assert_eq!(img.pixels, vec![0, 2, 4, 255]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.png");
        let img = phantom(32);
        img.save(&p).unwrap();
        assert_eq!(ImageFile::load(&p).unwrap(), img);
    }

    #[test]
    fn pad_then_crop_restores_shape() {
        let t = Tensor::from_fn(&[1, 1, 5, 7], |i| i as f64);
        let p = pad_to_multiple(&t, 4).unwrap();
        assert_eq!(p.shape(), &[1, 1, 8, 8]);
        assert_eq!(p.data()[7], 6.0);
        assert_eq!(p.data()[63], 34.0);
        assert_eq!(crop(&p, 5, 7).unwrap(), t);
    }

    #[test]
    fn phantom_is_piecewise_constant() {
        let img = phantom(64);
        let mut levels: Vec<u8> = img.pixels.clone();
        levels.sort_unstable();
        levels.dedup();
        assert_eq!(levels, vec![20, 60, 140, 210]);
    }
}
