//! Forward models `y = Hx + e`: identity or blur operators with exact
//! adjoints, additive white Gaussian noise, and SNR-based noise calibration.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Element, LinearOperator, Tensor};

/// 2-D blur kernel with odd dimensions, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    rows: usize,
    cols: usize,
    taps: Vec<f64>,
    normalized: bool,
}

impl Kernel {
    pub fn new(rows: usize, cols: usize, taps: Vec<f64>) -> Result<Self> {
        ensure!(
            rows % 2 == 1 && cols % 2 == 1,
            "kernel dimensions must be odd, got {rows}x{cols}"
        );
        ensure!(taps.len() == rows * cols, "kernel has {} taps, expected {}", taps.len(), rows * cols);
        ensure!(taps.iter().all(|t| t.is_finite()), "kernel taps must be finite");
        Ok(Self {
            rows,
            cols,
            taps,
            normalized: false,
        })
    }

    /// Rescales the taps to sum to one.
    pub fn normalize(mut self) -> Result<Self> {
        let s: f64 = self.taps.iter().sum();
        ensure!(s.abs() > 1e-300, "kernel taps sum to zero and cannot be normalized");
        self.taps.iter_mut().for_each(|t| *t /= s);
        self.normalized = true;
        Ok(self)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn tap(&self, r: usize, c: usize) -> f64 {
        self.taps[r * self.cols + c]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Sampled isotropic Gaussian of the given standard deviation, normalized to sum 1.
pub fn gaussian_kernel(std: f64, size: usize) -> Result<Kernel> {
    ensure!(size % 2 == 1, "gaussian kernel size must be odd, got {size}");
    ensure!(size >= 3, "gaussian kernel size must be at least 3, got {size}");
    ensure!(std > 0.0 && std.is_finite(), "gaussian std must be positive, got {std}");
    let r = (size / 2) as f64;
    let taps = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
            (-(x * x + y * y) / (2.0 * std * std)).exp()
        })
        .collect();
    Kernel::new(size, size, taps)?.normalize()
}

/// Parses the plain-text kernel format: one row per line, whitespace-separated
/// decimals, no header. Blank lines are ignored.
pub fn parse_kernel(text: &str, origin: &Path) -> Result<Kernel> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut last_line = 0;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        last_line = line_no;
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line_no, format!("not a finite number: {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(
                    line_no,
                    format!("ragged row: {} values, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(1, "kernel file is empty".into()));
    }
    let (h, w) = (rows.len(), rows[0].len());
    if h % 2 == 0 || w % 2 == 0 {
        return Err(parse_err(last_line, format!("kernel dimensions must be odd, got {h}x{w}")));
    }
    let kernel = Kernel::new(h, w, rows.concat())?;
    let sum: f64 = kernel.taps().iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        log::warn!(
            "{}: kernel taps sum to {sum}, normalizing to 1",
            origin.display()
        );
    }
    kernel.normalize()
}

pub fn load_kernel(path: impl AsRef<Path>) -> Result<Kernel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kernel(&text, path)
}

/// Writes a kernel in the plain-text format accepted by [`load_kernel`].
pub fn format_kernel(kernel: &Kernel) -> String {
    let mut s = String::new();
    for r in 0..kernel.rows {
        let row: Vec<String> = (0..kernel.cols)
            .map(|c| format!("{:e}", kernel.tap(r, c)))
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Linear degradation `H` with replicate boundary handling. Shape-preserving.
#[derive(Clone, Debug, PartialEq)]
pub enum DegradationOperator {
    Identity,
    Blur(Kernel),
}

impl DegradationOperator {
    fn check<T: Element>(&self, x: &Tensor<T>) -> Result<()> {
        let (_, _, h, w) = x.dims4()?;
        if let DegradationOperator::Blur(k) = self {
            ensure!(
                h >= k.rows && w >= k.cols,
                "image {h}x{w} smaller than blur kernel {}x{}",
                k.rows,
                k.cols
            );
        }
        Ok(())
    }

    /// Correlation with the kernel: `y[i,j] = Σ k[a,b]·x[clamp(i+a−r), clamp(j+b−c)]`.
    pub fn apply<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let DegradationOperator::Blur(k) = self else {
            return Ok(x.clone());
        };
        let (_, _, h, w) = x.dims4()?;
        let (ry, rx) = (k.rows / 2, k.cols / 2);
        let mut out = vec![T::zero(); x.len()];
        for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0f64;
                    for a in 0..k.rows {
                        let sy = (i + a).saturating_sub(ry).min(h - 1);
                        let line = &src[sy * w..(sy + 1) * w];
                        for b in 0..k.cols {
                            let sx = (j + b).saturating_sub(rx).min(w - 1);
                            acc += k.tap(a, b) * line[sx].f64();
                        }
                    }
                    dst[i * w + j] = T::of(acc);
                }
            }
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), out))
    }

    /// Exact transpose of [`apply`](Self::apply): flipped-kernel convolution whose
    /// out-of-range taps accumulate onto the replicated border pixels.
    pub fn adjoint<T: Element>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(y)?;
        let DegradationOperator::Blur(k) = self else {
            return Ok(y.clone());
        };
        let (_, _, h, w) = y.dims4()?;
        let (ry, rx) = (k.rows / 2, k.cols / 2);
        let mut out = vec![T::zero(); y.len()];
        let mut acc = vec![0.0f64; h * w];
        for (src, dst) in y.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
            acc.fill(0.0);
            for i in 0..h {
                for j in 0..w {
                    let g = src[i * w + j].f64();
                    for a in 0..k.rows {
                        let sy = (i + a).saturating_sub(ry).min(h - 1);
                        let line = &mut acc[sy * w..(sy + 1) * w];
                        for b in 0..k.cols {
                            let sx = (j + b).saturating_sub(rx).min(w - 1);
                            line[sx] += k.tap(a, b) * g;
                        }
                    }
                }
            }
            for (d, &a) in dst.iter_mut().zip(&acc) {
                *d = T::of(a);
            }
        }
        Ok(Tensor::from_parts(y.shape().to_vec(), out))
    }

    pub fn kernel(&self) -> Option<&Kernel> {
        match self {
            DegradationOperator::Identity => None,
            DegradationOperator::Blur(k) => Some(k),
        }
    }
}

impl<T: Element> LinearOperator<T> for DegradationOperator {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        DegradationOperator::apply(self, x)
    }

    fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        DegradationOperator::adjoint(self, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub std: f64,
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKindName {
    Identity,
    Gaussian,
    File,
}

/// Serializable description of a degradation operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub kind: OperatorKindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaussian: Option<GaussianSpec>,
}

impl OperatorSpec {
    pub fn identity() -> Self {
        Self {
            kind: OperatorKindName::Identity,
            kernel_path: None,
            gaussian: None,
        }
    }

    pub fn gaussian(std: f64, size: usize) -> Self {
        Self {
            kind: OperatorKindName::Gaussian,
            kernel_path: None,
            gaussian: Some(GaussianSpec { std, size }),
        }
    }

    pub fn file(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: OperatorKindName::File,
            kernel_path: Some(path.into()),
            gaussian: None,
        }
    }

    /// Parses `none`, `gaussian:STD,SIZE`, or a kernel file path.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") || s.eq_ignore_ascii_case("identity") {
            return Ok(Self::identity());
        }
        if let Some(rest) = s.strip_prefix("gaussian:") {
            let (std, size) = rest
                .split_once(',')
                .ok_or_else(|| Error::invalid(format!("expected gaussian:STD,SIZE, got {s:?}")))?;
            let std = std
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad gaussian std in {s:?}")))?;
            let size = size
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad gaussian size in {s:?}")))?;
            return Ok(Self::gaussian(std, size));
        }
        Ok(Self::file(s))
    }

    pub fn build(&self) -> Result<DegradationOperator> {
        match self.kind {
            OperatorKindName::Identity => Ok(DegradationOperator::Identity),
            OperatorKindName::Gaussian => {
                let g = self
                    .gaussian
                    .ok_or_else(|| Error::invalid("gaussian operator without parameters"))?;
                Ok(DegradationOperator::Blur(gaussian_kernel(g.std, g.size)?))
            }
            OperatorKindName::File => {
                let p = self
                    .kernel_path
                    .as_ref()
                    .ok_or_else(|| Error::invalid("file operator without kernel_path"))?;
                Ok(DegradationOperator::Blur(load_kernel(p)?))
            }
        }
    }
}

impl fmt::Display for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, &self.gaussian, &self.kernel_path) {
            (OperatorKindName::Gaussian, Some(g), _) => write!(f, "gaussian:{},{}", g.std, g.size),
            (OperatorKindName::File, _, Some(p)) => write!(f, "kernel:{}", p.display()),
            _ => f.write_str("identity"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation on the [0, 255] pixel scale.
    pub sigma: f64,
    pub seed: u64,
}

/// `x + σ·g` with `g` i.i.d. standard normal from a seeded stream. Not clipped.
pub fn add_awgn<T: Element>(x: &Tensor<T>, spec: NoiseSpec) -> Result<Tensor<T>> {
    ensure!(spec.sigma >= 0.0 && spec.sigma.is_finite(), "sigma must be non-negative, got {}", spec.sigma);
    let mut out = x.clone();
    if spec.sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for v in out.data_mut() {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v = T::of(v.f64() + spec.sigma * g);
    }
    Ok(out)
}

/// Noise level whose expected SNR against `x` equals `target_snr_db`:
/// `σ = ‖x‖₂ / (√N · 10^(target/20))`.
pub fn sigma_for_input_snr<T: Element>(x: &Tensor<T>, target_snr_db: f64) -> Result<f64> {
    let norm = x.norm_sq_f64().sqrt();
    ensure!(norm > 0.0, "cannot calibrate noise against an all-zero image");
    ensure!(!target_snr_db.is_nan(), "target SNR must be a number");
    Ok(norm / ((x.len() as f64).sqrt() * 10f64.powf(target_snr_db / 20.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_closed_form_ratio() {
        let k = gaussian_kernel(1.6, 9).unwrap();
        let sum: f64 = k.taps().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        let ratio = k.tap(4, 4) / k.tap(4, 5);
        let expected = (1.0 / (2.0 * 1.6 * 1.6f64)).exp();
        assert!((ratio - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn gaussian_delta_limit_and_symmetry() {
        let k = gaussian_kernel(1e-3, 5).unwrap();
        assert!((k.tap(2, 2) - 1.0).abs() < 1e-12);
        let k = gaussian_kernel(2.3, 7).unwrap();
        for r in 0..7 {
            for c in 0..7 {
                assert_eq!(k.tap(r, c), k.tap(6 - r, c));
                assert_eq!(k.tap(r, c), k.tap(r, 6 - c));
            }
        }
        assert!(gaussian_kernel(1.0, 4).is_err());
        assert!(gaussian_kernel(1.0, 1).is_err());
    }

    #[test]
    fn kernel_parsing() {
        let p = Path::new("k.txt");
        let k = parse_kernel("1\n", p).unwrap();
        assert_eq!(k.dims(), (1, 1));
        let k = parse_kernel("1 1 1\n1 1 1\n1 1 1\n", p).unwrap();
        assert!(k.taps().iter().all(|&t| (t - 1.0 / 9.0).abs() < 1e-15));

        match parse_kernel("1 2 3\n4 5\n6 7 8\n", p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_kernel("1 2 3\n4 x 6\n", p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_kernel("1 2\n3 4\n", p), Err(Error::Parse { .. })));
        assert!(matches!(parse_kernel("", p), Err(Error::Parse { .. })));
    }

    #[test]
    fn identity_and_delta_are_identity() {
        let x = Tensor::from_fn(&[1, 1, 5, 6], |i| (i as f64).sin());
        let id = DegradationOperator::Identity;
        assert_eq!(id.apply(&x).unwrap(), x);
        assert_eq!(id.adjoint(&x).unwrap(), x);
        let delta = parse_kernel("0 0 0\n0 1 0\n0 0 0\n", Path::new("d")).unwrap();
        let op = DegradationOperator::Blur(delta);
        assert_eq!(op.apply(&x).unwrap(), x);
        assert_eq!(op.adjoint(&x).unwrap(), x);
    }

    #[test]
    fn operator_spec_parsing() {
        assert_eq!(OperatorSpec::parse("none").unwrap(), OperatorSpec::identity());
        assert_eq!(
            OperatorSpec::parse("gaussian:1.6,9").unwrap(),
            OperatorSpec::gaussian(1.6, 9)
        );
        assert_eq!(OperatorSpec::parse("k.txt").unwrap(), OperatorSpec::file("k.txt"));
        assert!(OperatorSpec::parse("gaussian:1.6").is_err());
        assert_eq!(OperatorSpec::gaussian(1.6, 9).to_string(), "gaussian:1.6,9");
    }

    #[test]
    fn zero_sigma_is_noop_and_seeds_repeat() {
        let x = Tensor::from_fn(&[1, 1, 8, 8], |i| i as f64);
        assert_eq!(add_awgn(&x, NoiseSpec { sigma: 0.0, seed: 3 }).unwrap(), x);
        let a = add_awgn(&x, NoiseSpec { sigma: 5.0, seed: 3 }).unwrap();
        let b = add_awgn(&x, NoiseSpec { sigma: 5.0, seed: 3 }).unwrap();
        let c = add_awgn(&x, NoiseSpec { sigma: 5.0, seed: 4 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn calibration_limits() {
        let x = Tensor::full(&[1, 1, 4, 4], 100.0f64);
        assert!((sigma_for_input_snr(&x, 0.0).unwrap() - 100.0).abs() < 1e-12);
        assert!((sigma_for_input_snr(&x, 20.0).unwrap() - 10.0).abs() < 1e-12);
        assert!(sigma_for_input_snr(&x, 400.0).unwrap() < 1e-15);
        assert!(sigma_for_input_snr(&Tensor::<f64>::zeros(&[1, 1, 2, 2]), 5.0).is_err());
    }
}
