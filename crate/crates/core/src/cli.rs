//! `diptv` command-line interface.
//!
//! Exit codes: 0 success, 1 file or I/O problem, 2 usage error, 3 numerical
//! failure (divergence or a failed gradient check).

use std::ffi::OsString;
use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::degradation::{add_awgn, sigma_for_input_snr, NoiseSpec, OperatorSpec};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, Task};
use crate::io::{crop, pad_to_multiple, phantom, ImageFile};
use crate::pipeline::{
    psnr_db, restore, restore_tv_baseline, run_experiment, snr_db, CsvSink, ExperimentConfig, Method,
    RestoreConfig, DEFAULT_BASELINE_TV_EPS,
};
use crate::selfcheck::{generator_checks, primitive_checks};
use crate::tensor::Tensor;

/// TV weight used by `restore --method dip-tv` when `--lambda` is absent.
pub const DEFAULT_DIP_TV_LAMBDA: f64 = 0.2;
/// TV weight used by `restore --method tv` when `--lambda` is absent.
pub const DEFAULT_TV_LAMBDA: f64 = 0.3;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "diptv", version, about = "Image restoration with a deep image prior and TV regularization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Blur and/or add Gaussian noise to an image.
    Degrade(DegradeArgs),
    /// Restore a degraded image.
    Restore(RestoreArgs),
    /// Print SNR and PSNR of an estimate against a reference.
    Evaluate(EvaluateArgs),
    /// Run a grid of restorations from a JSON config.
    Experiment(ExperimentArgs),
    /// Finite-difference check of all gradients in double precision.
    Gradcheck(GradcheckArgs),
    /// Write the piecewise-constant test image.
    Phantom(PhantomArgs),
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Noise standard deviation on the [0, 255] scale.
    #[arg(long, required_unless_present = "target_snr", conflicts_with = "target_snr")]
    pub sigma: Option<f64>,
    /// Pick σ so the expected input SNR (dB) equals this value.
    #[arg(long)]
    pub target_snr: Option<f64>,
    /// `none`, `gaussian:STD,SIZE`, or a kernel text file.
    #[arg(long, default_value = "none")]
    pub kernel: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CliMethod {
    Dip,
    #[value(alias = "dip_tv")]
    DipTv,
    #[value(alias = "tv-baseline", alias = "tv_baseline")]
    Tv,
}

impl From<CliMethod> for Method {
    fn from(m: CliMethod) -> Self {
        match m {
            CliMethod::Dip => Method::Dip,
            CliMethod::DipTv => Method::DipTv,
            CliMethod::Tv => Method::TvBaseline,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CliTask {
    Denoise,
    Deblur,
}

impl From<CliTask> for Task {
    fn from(t: CliTask) -> Self {
        match t {
            CliTask::Denoise => Task::Denoise,
            CliTask::Deblur => Task::Deblur,
        }
    }
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "dip-tv")]
    pub method: CliMethod,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum, default_value = "denoise")]
    pub task: CliTask,
    /// Forward model; required for deblurring.
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Clean image: enables SNR reporting and best-iterate selection.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Write (step, loss, snr) samples here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub tv_eps: Option<f64>,
    /// Report the last iterate even when a reference is given.
    #[arg(long)]
    pub final_iterate: bool,
    #[command(flatten)]
    pub generator: GeneratorArgs,
}

/// Overrides applied on top of the task's default generator.
#[derive(Debug, Args)]
pub struct GeneratorArgs {
    /// JSON generator config replacing the task default.
    #[arg(long)]
    pub generator_config: Option<PathBuf>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Filters per encoder/decoder level.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Skip-branch filters per level (0 disables skips).
    #[arg(long)]
    pub skip_channels: Option<usize>,
    #[arg(long)]
    pub input_channels: Option<usize>,
    /// Optimize the network input jointly with the weights.
    #[arg(long)]
    pub optimize_input: bool,
}

impl GeneratorArgs {
    pub fn resolve(&self, task: Task) -> Result<GeneratorConfig> {
        let mut cfg = match &self.generator_config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => GeneratorConfig::default_for(task),
        };
        let depth = self.depth.unwrap_or(cfg.depth);
        if depth != cfg.depth || self.channels.is_some() || self.skip_channels.is_some() {
            let pick = |v: &[usize], o: Option<usize>| o.unwrap_or_else(|| v.first().copied().unwrap_or(0));
            let ch = pick(&cfg.channels_down, self.channels);
            let up = pick(&cfg.channels_up, self.channels);
            let skip = pick(&cfg.skip_channels, self.skip_channels);
            cfg.depth = depth;
            cfg.channels_down = vec![ch; depth];
            cfg.channels_up = vec![up; depth];
            cfg.skip_channels = vec![skip; depth];
        }
        if let Some(c) = self.input_channels {
            cfg.input_channels = c;
        }
        cfg.optimize_input |= self.optimize_input;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub estimate: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_csv: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    /// Bound for the generator loss; primitives are held to a tenth of it.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

/// Everything needed to re-create a degraded image from its source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub operator: OperatorSpec,
    pub sigma: f64,
    pub seed: u64,
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    output.with_extension("json")
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_NUMERIC,
        Error::Parse { .. } | Error::Io { .. } | Error::Image { .. } | Error::Json(_) | Error::Csv(_) => EXIT_IO,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Degrade(a) => degrade(a).map(|_| EXIT_OK),
        Command::Restore(a) => cmd_restore(a).map(|_| EXIT_OK),
        Command::Evaluate(a) => evaluate(a).map(|_| EXIT_OK),
        Command::Experiment(a) => experiment(a).map(|_| EXIT_OK),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Phantom(a) => phantom(a.size).save(&a.output).map(|_| EXIT_OK),
    }
}

fn degrade(a: DegradeArgs) -> Result<()> {
    let img = ImageFile::load(&a.input)?;
    let clean: Tensor<f64> = img.to_tensor(255.0);
    let operator = OperatorSpec::parse(&a.kernel)?;
    let op = operator.build()?;
    let sigma = match (a.sigma, a.target_snr) {
        (Some(s), None) => s,
        (None, Some(t)) => sigma_for_input_snr(&clean, t)?,
        _ => return Err(Error::invalid("give exactly one of --sigma and --target-snr")),
    };
    let measured = add_awgn(&op.apply(&clean)?, NoiseSpec { sigma, seed: a.seed })?;
    ImageFile::from_tensor(&measured, 255.0)?.save(&a.output)?;
    let sidecar = Sidecar {
        operator,
        sigma,
        seed: a.seed,
    };
    let path = sidecar_path(&a.output);
    let text = serde_json::to_string_pretty(&sidecar)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!("sigma={sigma:.4}");
    Ok(())
}

fn cmd_restore(a: RestoreArgs) -> Result<()> {
    let task = Task::from(a.task);
    let method = Method::from(a.method);
    let kernel = a.kernel.as_deref().unwrap_or("none");
    let operator = OperatorSpec::parse(kernel)?;
    if task == Task::Deblur && a.kernel.is_none() {
        return Err(Error::invalid("--task deblur needs --kernel"));
    }
    let op = operator.build()?;

    let img = ImageFile::load(&a.input)?;
    let y: Tensor<f32> = img.to_tensor(1.0);
    let reference: Option<Tensor<f32>> = match &a.reference {
        Some(p) => {
            let r = ImageFile::load(p)?;
            if (r.width, r.height, r.channels()) != (img.width, img.height, img.channels()) {
                return Err(Error::invalid("reference and input sizes differ"));
            }
            Some(r.to_tensor(1.0))
        }
        None => None,
    };

    let mut cfg = RestoreConfig::for_task(task, method);
    cfg.seed = a.seed;
    cfg.generator = a.generator.resolve(task)?;
    cfg.generator.output_channels = img.channels();
    cfg.track_best = !a.final_iterate;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.adam.lr = lr;
    }
    if let Some(n) = a.log_every {
        cfg.log_every = n;
    }
    cfg.lambda = match (method, a.lambda) {
        (Method::Dip, Some(l)) => {
            log::warn!("--lambda {l} ignored: plain DIP has no TV term");
            0.0
        }
        (Method::Dip, None) => 0.0,
        (_, Some(l)) => l,
        (Method::DipTv, None) => DEFAULT_DIP_TV_LAMBDA,
        (Method::TvBaseline, None) => DEFAULT_TV_LAMBDA,
    };
    cfg.tv_eps = match (a.tv_eps, method) {
        (Some(e), _) => e,
        (None, Method::TvBaseline) => DEFAULT_BASELINE_TV_EPS,
        (None, _) => cfg.tv_eps,
    };

    let (estimate, trace) = match method {
        Method::TvBaseline => {
            let r = restore_tv_baseline(&y, &op, &cfg)?;
            let trace: Vec<(usize, f64, Option<f64>)> = r
                .objective
                .iter()
                .enumerate()
                .skip(1)
                .filter(|(i, _)| i % cfg.log_every == 0 || *i == cfg.steps)
                .map(|(i, f)| (i, *f, None))
                .collect();
            (r.image, trace)
        }
        Method::Dip | Method::DipTv => {
            let m = cfg.generator.size_multiple();
            let yp = pad_to_multiple(&y, m)?;
            let rp = reference.as_ref().map(|r| pad_to_multiple(r, m)).transpose()?;
            let r = restore(&yp, &op, &cfg, rp.as_ref())?;
            if let Some(b) = &r.best {
                log::info!("best iterate at step {} ({:.2} dB on the padded image)", b.step, b.snr_db);
            }
            let trace = r.trace.iter().map(|p| (p.step, p.loss, p.snr_db)).collect();
            (crop(&r.image, img.height, img.width)?, trace)
        }
    };
    let out = ImageFile::from_tensor(&estimate, 1.0)?;
    out.save(&a.output)?;

    if let Some(path) = &a.trace {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["step", "loss", "snr_db"])?;
        for (step, loss, snr) in trace {
            let snr = snr.map(|s| format!("{s:.4}")).unwrap_or_default();
            w.write_record([step.to_string(), format!("{loss:.6e}"), snr])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    if let Some(r) = &a.reference {
        let clean = ImageFile::load(r)?.to_tensor::<f64>(255.0);
        let est = out.to_tensor::<f64>(255.0);
        println!(
            "snr_db={:.4}, psnr_db={:.4}",
            snr_db(&clean, &est)?,
            psnr_db(&clean, &est, 255.0)?
        );
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let r = ImageFile::load(&a.reference)?.to_tensor::<f64>(255.0);
    let e = ImageFile::load(&a.estimate)?.to_tensor::<f64>(255.0);
    if r.shape() != e.shape() {
        return Err(Error::invalid(format!(
            "reference is {:?} but estimate is {:?}",
            r.shape(),
            e.shape()
        )));
    }
    println!("snr_db={:.4}, psnr_db={:.4}", snr_db(&r, &e)?, psnr_db(&r, &e, 255.0)?);
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let file = File::create(&a.out_csv).map_err(|e| Error::io(&a.out_csv, e))?;
    let mut sink = CsvSink::new(file)?;
    let records = run_experiment(&cfg, base, a.jobs, |rec| {
        log::info!(
            "{} {} {} sigma={}: {:.2} dB -> {:.2} dB ({:.1}s)",
            rec.image,
            rec.operator,
            rec.method,
            rec.sigma,
            rec.snr_in_db,
            rec.snr_out_db,
            rec.seconds
        );
        sink.write(rec)
    })?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} cells failed", records.len());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let mut results = primitive_checks(a.seed, a.tolerance / 10.0)?;
    results.extend(generator_checks(a.size, a.depth, a.seed, a.tolerance)?);
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        println!(
            "{} {:<32} max_rel_err={:.3e} tol={:.0e}",
            if r.passed() { "ok  " } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.tolerance
        );
    }
    Ok(if ok { EXIT_OK } else { EXIT_NUMERIC })
}
