//! Grid runner over images × operators × noise levels × methods.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::AdamConfig;
use super::baseline::{restore_tv_baseline, tune_tv_baseline, DEFAULT_BASELINE_TV_EPS};
use super::metrics::{psnr_db, snr_db};
use super::restore::{restore, Method, RestoreConfig};
use crate::degradation::{add_awgn, NoiseSpec, OperatorSpec};
use crate::error::{ensure, Error, Result};
use crate::generator::{GeneratorConfig, Task};
use crate::io::{crop, pad_to_multiple, ImageFile};
use crate::tensor::Tensor;

/// Per-method overrides of the shared restoration settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Tuning mode: try each λ and keep the best SNR against the clean image.
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub tv_eps: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Image paths, relative to the config file.
    pub images: Vec<PathBuf>,
    #[serde(default = "default_operators")]
    pub operators: Vec<OperatorSpec>,
    /// Noise standard deviations on the [0, 255] scale.
    pub sigmas: Vec<f64>,
    pub methods: Vec<MethodSpec>,
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    pub steps: usize,
    #[serde(default)]
    pub adam: Option<AdamConfig>,
    #[serde(default = "default_tv_eps")]
    pub tv_eps: f64,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    #[serde(default = "default_track_best")]
    pub track_best: bool,
}

fn default_operators() -> Vec<OperatorSpec> {
    vec![OperatorSpec::identity()]
}

fn default_tv_eps() -> f64 {
    1e-6
}

fn default_track_best() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, "steps must be at least 1");
        ensure!(
            self.sigmas.iter().all(|s| *s >= 0.0 && s.is_finite()),
            "sigmas must be non-negative"
        );
        for m in &self.methods {
            if m.method != Method::Dip && m.lambda.is_none() && m.lambda_grid.is_none() {
                return Err(Error::Config(format!(
                    "method {} needs an explicit lambda or lambda_grid",
                    m.method
                )));
            }
            if let Some(g) = &m.lambda_grid {
                ensure!(!g.is_empty(), "lambda_grid for {} is empty", m.method);
            }
        }
        if let Some(g) = &self.generator {
            g.validate()?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical (key-sorted, compact) JSON form, first 16 hex digits.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("serializable config");
        let canonical = serde_json::to_string(&value).expect("serializable value");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }

    fn base_restore(&self, method: Method) -> RestoreConfig {
        let mut r = RestoreConfig::for_task(self.task, method);
        r.steps = self.steps;
        r.seed = self.seed;
        r.tv_eps = self.tv_eps;
        r.track_best = self.track_best;
        if let Some(a) = self.adam {
            r.adam = a;
        }
        if let Some(g) = &self.generator {
            r.generator = g.clone();
        }
        r
    }
}

/// One `(image, operator, σ, method)` result; output metrics are against the clean image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentRecord {
    pub image: String,
    pub method: Method,
    pub operator: String,
    pub sigma: f64,
    pub snr_in_db: f64,
    pub psnr_in_db: f64,
    pub snr_out_db: f64,
    pub psnr_out_db: f64,
    pub steps: usize,
    pub seconds: f64,
    pub seed: u64,
    pub config_hash: String,
    /// λ used (the selected one in tuning mode).
    pub lambda: f64,
    pub error: Option<String>,
}

pub const CSV_HEADER: [&str; 12] = [
    "image",
    "method",
    "operator",
    "sigma",
    "snr_in_db",
    "psnr_in_db",
    "snr_out_db",
    "psnr_out_db",
    "steps",
    "seconds",
    "seed",
    "config_hash",
];

impl ExperimentRecord {
    pub fn csv_row(&self) -> [String; 12] {
        let f = |v: f64| format!("{v:.4}");
        [
            self.image.clone(),
            self.method.to_string(),
            self.operator.clone(),
            f(self.sigma),
            f(self.snr_in_db),
            f(self.psnr_in_db),
            f(self.snr_out_db),
            f(self.psnr_out_db),
            self.steps.to_string(),
            f(self.seconds),
            self.seed.to_string(),
            self.config_hash.clone(),
        ]
    }
}

/// Appends records to a CSV file, flushing after every row.
pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(inner: W) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        writer.write_record(CSV_HEADER)?;
        writer.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(Self { writer })
    }

    pub fn write(&mut self, rec: &ExperimentRecord) -> Result<()> {
        self.writer.write_record(rec.csv_row())?;
        self.writer.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Degradation seed for one (image, operator, σ) cell, shared by every method.
fn cell_seed(base: u64, image: usize, operator: usize, sigma: usize) -> u64 {
    let mut h = Sha256::new();
    for v in [base, image as u64, operator as u64, sigma as u64] {
        h.update(v.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

struct Cell {
    index: usize,
    image: usize,
    operator: usize,
    sigma: usize,
    method: usize,
}

/// Runs every cell, handing each record to `sink` as soon as it is ready.
///
/// Cells are independent; with `jobs > 1` they run on scoped threads and
/// records arrive in completion order. Per-cell failures (missing files,
/// divergence) become records with `error` set and NaN metrics.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    jobs: usize,
    mut sink: impl FnMut(&ExperimentRecord) -> Result<()>,
) -> Result<Vec<ExperimentRecord>> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mut cells = Vec::new();
    for image in 0..cfg.images.len() {
        for operator in 0..cfg.operators.len() {
            for sigma in 0..cfg.sigmas.len() {
                for method in 0..cfg.methods.len() {
                    cells.push(Cell {
                        index: cells.len(),
                        image,
                        operator,
                        sigma,
                        method,
                    });
                }
            }
        }
    }
    let mut records: BTreeMap<usize, ExperimentRecord> = BTreeMap::new();
    let jobs = jobs.max(1);
    if jobs == 1 {
        for cell in &cells {
            let rec = run_cell(cfg, base_dir, &hash, cell);
            sink(&rec)?;
            records.insert(cell.index, rec);
        }
    } else {
        let (tx, rx) = mpsc::channel();
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| -> Result<()> {
            for _ in 0..jobs.min(cells.len()) {
                let tx = tx.clone();
                let (cells, next, hash) = (&cells, &next, &hash);
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    let Some(cell) = cells.get(i) else { break };
                    if tx.send((cell.index, run_cell(cfg, base_dir, hash, cell))).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (i, rec) in rx {
                sink(&rec)?;
                records.insert(i, rec);
            }
            Ok(())
        })?;
    }
    Ok(records.into_values().collect())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn run_cell(cfg: &ExperimentConfig, base_dir: &Path, hash: &str, cell: &Cell) -> ExperimentRecord {
    let spec = &cfg.methods[cell.method];
    let sigma = cfg.sigmas[cell.sigma];
    let mut op_spec = cfg.operators[cell.operator].clone();
    if let Some(p) = &op_spec.kernel_path {
        op_spec.kernel_path = Some(resolve(base_dir, p));
    }
    let mut rec = ExperimentRecord {
        image: cfg.images[cell.image].display().to_string(),
        method: spec.method,
        operator: cfg.operators[cell.operator].to_string(),
        sigma,
        snr_in_db: f64::NAN,
        psnr_in_db: f64::NAN,
        snr_out_db: f64::NAN,
        psnr_out_db: f64::NAN,
        steps: spec.steps.unwrap_or(cfg.steps),
        seconds: 0.0,
        seed: cfg.seed,
        config_hash: hash.to_string(),
        lambda: spec.lambda.unwrap_or(0.0),
        error: None,
    };
    let start = Instant::now();
    let outcome = (|| -> Result<()> {
        let img = ImageFile::load(resolve(base_dir, &cfg.images[cell.image]))?;
        let op = op_spec.build()?;
        let clean: Tensor<f32> = img.to_tensor(255.0);
        let noise = NoiseSpec {
            sigma,
            seed: cell_seed(cfg.seed, cell.image, cell.operator, cell.sigma),
        };
        let measured = add_awgn(&op.apply(&clean)?, noise)?;
        rec.snr_in_db = snr_db(&clean, &measured)?;
        rec.psnr_in_db = psnr_db(&clean, &measured, 255.0)?;

        let unit = |t: &Tensor<f32>| t.map(|v| v / 255.0);
        let (y, reference) = (unit(&measured), unit(&clean));
        let mut rcfg = cfg.base_restore(spec.method);
        rcfg.steps = rec.steps;
        rcfg.tv_eps = match (spec.tv_eps, spec.method) {
            (Some(e), _) => e,
            (None, Method::TvBaseline) => DEFAULT_BASELINE_TV_EPS,
            (None, _) => cfg.tv_eps,
        };
        rcfg.generator.output_channels = img.channels();
        let estimate = match spec.method {
            Method::TvBaseline => match &spec.lambda_grid {
                Some(grid) => {
                    let (l, run) = tune_tv_baseline(&y, &op, &rcfg, grid, &reference)?;
                    rec.lambda = l;
                    run.image
                }
                None => {
                    rcfg.lambda = rec.lambda;
                    restore_tv_baseline(&y, &op, &rcfg)?.image
                }
            },
            Method::Dip | Method::DipTv => {
                let (h, w) = (img.height, img.width);
                let m = rcfg.generator.size_multiple();
                let (yp, rp) = (pad_to_multiple(&y, m)?, pad_to_multiple(&reference, m)?);
                let grid = match (&spec.lambda_grid, spec.method) {
                    (Some(g), Method::DipTv) => g.clone(),
                    _ => vec![rec.lambda],
                };
                let mut best: Option<(f64, f64, Tensor<f32>)> = None;
                for lambda in grid {
                    rcfg.lambda = lambda;
                    let r = restore(&yp, &op, &rcfg, Some(&rp))?;
                    let out = crop(&r.image, h, w)?;
                    let s = snr_db(&reference, &out)?;
                    if best.as_ref().is_none_or(|(_, bs, _)| s > *bs) {
                        best = Some((lambda, s, out));
                    }
                }
                let (l, _, out) = best.expect("non-empty grid");
                rec.lambda = if spec.method == Method::Dip { 0.0 } else { l };
                out
            }
        };
        let estimate = estimate.map(|v| v * 255.0);
        rec.snr_out_db = snr_db(&clean, &estimate)?;
        rec.psnr_out_db = psnr_db(&clean, &estimate, 255.0)?;
        Ok(())
    })();
    rec.seconds = start.elapsed().as_secs_f64();
    if let Err(e) = outcome {
        log::error!("cell {} ({} / {}): {e}", cell.index, rec.image, rec.method);
        rec.error = Some(e.to_string());
    }
    rec
}
