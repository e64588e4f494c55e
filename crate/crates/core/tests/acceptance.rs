//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Run a subset with `cargo test --test acceptance -- 1 5 9`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use diptv::cli::Sidecar;
use diptv::degradation::{add_awgn, gaussian_kernel, load_kernel, sigma_for_input_snr, DegradationOperator, NoiseSpec};
use diptv::generator::{GradMap, GeneratorConfig, Task};
use diptv::io::{crop, ImageFile};
use diptv::pipeline::{
    psnr_db, restore, snr_db, tune_tv_baseline, AdamConfig, AdamState, Method, RestoreConfig, DEFAULT_BASELINE_TV_EPS,
};
use diptv::selfcheck::{generator_checks, primitive_checks};
use diptv::tensor::{Graph, Tensor};
use diptv::tv::{tv_aniso, tv_aniso_value, tv_grad_oracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reduced generator for the desk runs: five levels of 32 filters.
const DESK_DEPTH: usize = 5;
const DESK_CHANNELS: usize = 32;
/// TV weights fixed beforehand on noise realizations not used below.
const DIP_TV_LAMBDA_DENOISE: f64 = 0.2;
const DIP_TV_LAMBDA_DEBLUR: f64 = 0.003;
/// The baseline gets the best λ of this grid per realization.
const TV_LAMBDA_GRID: [f64; 7] = [0.15, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6];
const TV_LAMBDA_GRID_DEBLUR: [f64; 5] = [0.0003, 0.001, 0.002, 0.003, 0.005];
const TV_STEPS: usize = 2000;
const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn fmt_all(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/")
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut prims = primitive_checks(0, 1e-5).expect("primitive checks run");
    prims.extend(primitive_checks(1, 1e-5).expect("primitive checks run"));
    let gen = generator_checks(16, 2, 0, 1e-4).expect("generator check runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = |rs: &[diptv::selfcheck::CheckResult]| rs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<_> = prims.iter().chain(&gen).filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    Outcome {
        pass: failed.is_empty() && secs < 120.0,
        detail: format!(
            "{} primitive checks (worst {:.1e} < 1e-5), {} generator tensors (worst {:.1e} < 1e-4), {secs:.1}s{}",
            prims.len(),
            worst(&prims),
            gen.len(),
            worst(&gen),
            if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }
        ),
    }
}

/// Double loop straight from the definition: forward differences, zero past the last row/column.
fn tv_brute(x: &Tensor<f64>) -> f64 {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let at = |ch: usize, i: usize, j: usize| x.data()[(ch * h + i) * w + j];
    let mut total = 0.0;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    total += (at(ch, i + 1, j) - at(ch, i, j)).abs();
                }
                if j + 1 < w {
                    total += (at(ch, i, j + 1) - at(ch, i, j)).abs();
                }
            }
        }
    }
    total
}

fn c2_tv_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_value = 0.0f64;
    for c in [1, 3] {
        for _ in 0..100 {
            let x = random(&mut rng, &[1, c, 8, 8]);
            worst_value = worst_value.max((tv_aniso_value(&x, 0.0).unwrap() - tv_brute(&x)).abs());
        }
    }
    let mut worst_grad = 0.0f64;
    for c in [1, 3] {
        for _ in 0..10 {
            let x = random(&mut rng, &[1, c, 8, 8]);
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let tv = tv_aniso(&mut g, v, 1e-3).unwrap();
            let auto = g.backward(tv).unwrap().take(v).unwrap();
            let oracle = tv_grad_oracle(&x, 1e-3).unwrap();
            for (a, b) in auto.data().iter().zip(oracle.data()) {
                worst_grad = worst_grad.max((a - b).abs());
            }
        }
    }
    Outcome {
        pass: worst_value <= 1e-12 && worst_grad <= 1e-10,
        detail: format!("200 images: max |TV - loop| = {worst_value:.1e}; gradient vs oracle {worst_grad:.1e}"),
    }
}

fn c3_adjoint() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ops = [
        ("gaussian 1.6 9x9", DegradationOperator::Blur(gaussian_kernel(1.6, 9).unwrap())),
        ("motion 19x19 file", DegradationOperator::Blur(load_kernel(data("motion19.txt")).unwrap())),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, op) in &ops {
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let x = random(&mut rng, &[1, 1, 32, 32]);
            let y = random(&mut rng, &[1, 1, 32, 32]);
            let lhs = op.apply(&x).unwrap().dot_f64(&y);
            let rhs = x.dot_f64(&op.adjoint(&y).unwrap());
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
        }
        pass &= worst <= 1e-10;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let dims = ops[1].1.kernel().unwrap().dims();
    pass &= dims == (19, 19);
    Outcome {
        pass,
        detail: format!("max relative <Hx,y> - <x,H^T y>: {}", parts.join(", ")),
    }
}

fn c4_noise() -> Outcome {
    let cam = ImageFile::load(data("cameraman256.png")).unwrap();
    let full: Tensor<f64> = cam.to_tensor(255.0);
    let x = crop(&full, 128, 128).unwrap();
    let mut worst = 0.0f64;
    for target in [5.0, 10.0, 15.0, 20.0] {
        let sigma = sigma_for_input_snr(&x, target).unwrap();
        let avg: f64 = (0..10)
            .map(|seed| snr_db(&x, &add_awgn(&x, NoiseSpec { sigma, seed }).unwrap()).unwrap())
            .sum::<f64>()
            / 10.0;
        worst = worst.max((avg - target).abs());
    }
    let anchor = sigma_for_input_snr(&full, 15.0).unwrap();
    let rel = anchor / 30.02 - 1.0;
    Outcome {
        pass: worst <= 0.3 && rel.abs() <= 0.15,
        detail: format!(
            "max |mean SNR - target| = {worst:.3} dB over 5/10/15/20 dB; 15 dB on the 256x256 cameraman gives sigma {anchor:.2} ({:+.1}% vs 30.02)",
            100.0 * rel
        ),
    }
}

fn c5_adam() -> Outcome {
    let cfg = AdamConfig::default();
    let mut state = AdamState::<f64>::new(cfg);
    let mut theta = Tensor::new(&[1], vec![1.0]).unwrap();
    // independent scalar ADAM
    let (mut t0, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut worst = 0.0f64;
    let mut first = f64::NAN;
    for t in 1..=200 {
        let g = 2.0 * theta.data()[0];
        let mut grads = GradMap::new();
        grads.insert("theta".into(), Tensor::new(&[1], vec![g]).unwrap());
        state.step_named([("theta", &mut theta)], &grads).unwrap();

        let gs = 2.0 * t0;
        m = 0.9 * m + 0.1 * gs;
        v = 0.999 * v + 0.001 * gs * gs;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        t0 -= 0.01 * mh / (vh.sqrt() + 1e-8);
        worst = worst.max((theta.data()[0] - t0).abs());
        if t == 1 {
            first = theta.data()[0];
        }
    }
    // g = 1 at θ = 1: both bias-corrected moments equal 1
    let mut one = AdamState::<f64>::new(cfg);
    let mut th = Tensor::new(&[1], vec![1.0]).unwrap();
    let mut grads = GradMap::new();
    grads.insert("th".into(), Tensor::new(&[1], vec![1.0]).unwrap());
    one.step_named([("th", &mut th)], &grads).unwrap();
    let hand = 1.0 - 0.01 * 1.0 / (1.0 + 1e-8);
    let exact = th.data()[0] == hand && (th.data()[0] - 0.99).abs() < 1e-9 && first.is_finite();
    Outcome {
        pass: worst <= 1e-12 && exact,
        detail: format!("200-step θ² trajectory max diff {worst:.1e}; single step {:.12} (hand {hand:.12})", th.data()[0]),
    }
}

/// Clean and measured images on the [0, 255] scale.
fn degrade(path: &str, op: &DegradationOperator, sigma: f64, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let clean: Tensor<f32> = ImageFile::load(data(path)).unwrap().to_tensor(255.0);
    let y = add_awgn(&op.apply(&clean).unwrap(), NoiseSpec { sigma, seed }).unwrap();
    (clean, y)
}

fn unit(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v / 255.0)
}

fn desk_cfg(task: Task, method: Method, lambda: f64, steps: usize, seed: u64) -> RestoreConfig {
    let skip = match task {
        Task::Denoise => 4,
        Task::Deblur => DESK_CHANNELS,
    };
    RestoreConfig {
        lambda,
        steps,
        seed,
        generator: GeneratorConfig::uniform(DESK_DEPTH, DESK_CHANNELS, skip),
        ..RestoreConfig::for_task(task, method)
    }
}

struct DeskScores {
    input: Vec<f64>,
    dip: Vec<f64>,
    dip_tv: Vec<f64>,
    tv: Vec<f64>,
}

/// Runs the three methods per seed; `metric` maps (clean, estimate) on [0, 255] to a score.
fn desk_run(
    path: &str,
    task: Task,
    op: &DegradationOperator,
    sigma: f64,
    steps: usize,
    lambda: f64,
    grid: &[f64],
    metric: fn(&Tensor<f32>, &Tensor<f32>) -> f64,
) -> DeskScores {
    let mut s = DeskScores {
        input: vec![],
        dip: vec![],
        dip_tv: vec![],
        tv: vec![],
    };
    for &seed in &SEEDS {
        let (clean, y) = degrade(path, op, sigma, 7000 + seed);
        let (yu, ru) = (unit(&y), unit(&clean));
        let back = |t: &Tensor<f32>| t.map(|v| v * 255.0);
        s.input.push(metric(&clean, &y));
        for (method, out) in [(Method::Dip, &mut s.dip), (Method::DipTv, &mut s.dip_tv)] {
            let r = restore(&yu, op, &desk_cfg(task, method, lambda, steps, seed), Some(&ru)).unwrap();
            out.push(metric(&clean, &back(&r.image)));
        }
        let tv_cfg = RestoreConfig {
            steps: TV_STEPS,
            tv_eps: DEFAULT_BASELINE_TV_EPS,
            ..RestoreConfig::for_task(task, Method::TvBaseline)
        };
        let (_, r) = tune_tv_baseline(&yu, op, &tv_cfg, grid, &ru).unwrap();
        s.tv.push(metric(&clean, &back(&r.image)));
    }
    s
}

fn snr_metric(c: &Tensor<f32>, e: &Tensor<f32>) -> f64 {
    snr_db(c, e).unwrap()
}

fn psnr_metric(c: &Tensor<f32>, e: &Tensor<f32>) -> f64 {
    psnr_db(c, e, 255.0).unwrap()
}

fn c6_denoise() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for img in ["phantom64.png", "cameraman_crop64.png"] {
        let s = desk_run(
            img,
            Task::Denoise,
            &DegradationOperator::Identity,
            50.0,
            2000,
            DIP_TV_LAMBDA_DENOISE,
            &TV_LAMBDA_GRID,
            snr_metric,
        );
        let (i, d, dt, t) = (median(s.input.clone()), median(s.dip.clone()), median(s.dip_tv.clone()), median(s.tv.clone()));
        let (a, b, c) = (dt >= i + 4.0, dt >= d + 0.2, dt >= t);
        pass &= a && b && c;
        parts.push(format!(
            "{img}: in {i:.2}, DIP {d:.2} [{}], DIP-TV {dt:.2} [{}], TV {t:.2} [{}] -> (a) {} (b) {} (c) {}",
            fmt_all(&s.dip),
            fmt_all(&s.dip_tv),
            fmt_all(&s.tv),
            ok(a),
            ok(b),
            ok(c)
        ));
    }
    Outcome {
        pass,
        detail: format!("median SNR dB over 3 seeds; {} ({:.0}s)", parts.join("; "), start.elapsed().as_secs_f64()),
    }
}

fn c7_deblur() -> Outcome {
    let start = Instant::now();
    let op = DegradationOperator::Blur(gaussian_kernel(1.6, 9).unwrap());
    let s = desk_run(
        "phantom64.png",
        Task::Deblur,
        &op,
        2.0,
        2500,
        DIP_TV_LAMBDA_DEBLUR,
        &TV_LAMBDA_GRID_DEBLUR,
        psnr_metric,
    );
    let (i, d, dt, t) = (median(s.input), median(s.dip.clone()), median(s.dip_tv.clone()), median(s.tv));
    let (a, b) = (dt >= i + 2.0, dt >= d);
    Outcome {
        pass: a && b,
        detail: format!(
            "median PSNR dB: degraded {i:.2}, DIP {d:.2} [{}], DIP-TV {dt:.2} [{}] (TV baseline {t:.2}); +2 dB {}, >= DIP {} ({:.0}s)",
            fmt_all(&s.dip),
            fmt_all(&s.dip_tv),
            ok(a),
            ok(b),
            start.elapsed().as_secs_f64()
        ),
    }
}

fn c8_lambda_zero() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut identical = 0;
    for _ in 0..10 {
        let depth = rng.random_range(1..=3);
        let gen = GeneratorConfig {
            input_channels: rng.random_range(1..=6),
            ..GeneratorConfig::uniform(depth, rng.random_range(2..=6), rng.random_range(0..=3))
        };
        let size = (1 << depth) * rng.random_range(1..=3) * 2;
        let y = Tensor::<f32>::from_fn(&[1, 1, size, size], |_| rng.random_range(0.0..1.0));
        let op = if rng.random_bool(0.5) {
            DegradationOperator::Identity
        } else {
            DegradationOperator::Blur(gaussian_kernel(1.0, 3).unwrap())
        };
        let seed = rng.random();
        let steps = rng.random_range(2..=6);
        let run = |method| {
            let cfg = RestoreConfig {
                lambda: 0.0,
                steps,
                seed,
                generator: gen.clone(),
                ..RestoreConfig::for_task(Task::Denoise, method)
            };
            restore(&y, &op, &cfg, Some(&y)).unwrap()
        };
        let (a, b) = (run(Method::Dip), run(Method::DipTv));
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&a.image) == bits(&b.image) && bits(&a.final_image) == bits(&b.final_image) {
            identical += 1;
        }
    }
    Outcome {
        pass: identical == 10,
        detail: format!("{identical}/10 random configs bit-identical"),
    }
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_diptv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    (
        o.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

fn e2e(dir: &Path) -> Result<(Vec<Vec<u8>>, String), String> {
    let p = |n: &str| dir.join(n).to_str().unwrap().to_string();
    let clean = data("cameraman_crop64.png").to_str().unwrap().to_string();
    let (y, x, trace) = (p("y.png"), p("x.png"), p("trace.csv"));
    let steps = [
        vec!["degrade", "--input", &clean, "--output", &y, "--sigma", "25", "--kernel", "gaussian:1.0,5", "--seed", "9"],
        vec![
            "restore", "--input", &y, "--output", &x, "--method", "dip-tv", "--task", "deblur",
            "--kernel", "gaussian:1.0,5", "--lr", "0.01", "--lambda", "0.1", "--steps", "60", "--log-every", "10",
            "--depth", "3", "--channels", "8", "--skip-channels", "4", "--input-channels", "8", "--seed", "3",
            "--reference", &clean, "--trace", &trace,
        ],
        vec!["evaluate", "--reference", &clean, "--estimate", &x],
    ];
    let mut stdout = String::new();
    for args in &steps {
        let (code, out, err) = cli(args);
        if code != 0 {
            return Err(format!("`{}` exited {code}: {err}", args[0]));
        }
        stdout = out;
    }
    let side_text = std::fs::read_to_string(dir.join("y.json")).map_err(|e| e.to_string())?;
    let value: serde_json::Value = serde_json::from_str(&side_text).map_err(|e| e.to_string())?;
    let keys: Vec<_> = value.as_object().ok_or("sidecar is not an object")?.keys().cloned().collect();
    if keys != ["operator", "seed", "sigma"] || value["operator"]["kind"] != "gaussian" {
        return Err(format!("unexpected sidecar layout {side_text}"));
    }
    let _: Sidecar = serde_json::from_value(value).map_err(|e| e.to_string())?;
    let mut rdr = csv::Reader::from_path(dir.join("trace.csv")).map_err(|e| e.to_string())?;
    if rdr.headers().map_err(|e| e.to_string())?.iter().collect::<Vec<_>>() != ["step", "loss", "snr_db"] {
        return Err("bad trace header".into());
    }
    let rows = rdr.records().count();
    if rows != 6 {
        return Err(format!("trace has {rows} rows, expected 6"));
    }
    if !stdout.starts_with("snr_db=") || !stdout.contains(", psnr_db=") {
        return Err(format!("unexpected evaluate output {stdout:?}"));
    }
    let files = ["y.png", "y.json", "x.png", "trace.csv"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((files, stdout))
}

fn c9_cli() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (e2e(a.path()), e2e(b.path())) {
        (Ok((fa, sa)), Ok((fb, sb))) => {
            let same = fa == fb && sa == sb;
            Outcome {
                pass: same,
                detail: format!(
                    "degrade -> restore -> evaluate exit 0, sidecar and trace valid, {} across two runs; {}",
                    if same { "byte-identical" } else { "outputs DIFFER" },
                    sa.trim()
                ),
            }
        }
        (Err(e), _) | (_, Err(e)) => Outcome {
            pass: false,
            detail: e,
        },
    }
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "no"
    }
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient suite", c1_gradients),
        (2, "TV oracle", c2_tv_oracle),
        (3, "operator adjoint", c3_adjoint),
        (4, "noise calibration", c4_noise),
        (5, "ADAM oracle", c5_adam),
        (6, "desk denoising", c6_denoise),
        (7, "desk deblurring", c7_deblur),
        (8, "lambda=0 equivalence", c8_lambda_zero),
        (9, "end-to-end CLI", c9_cli),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let o = f();
        if !o.pass {
            failures += 1;
        }
        println!("{} [{id}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
