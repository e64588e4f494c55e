//! Desk-scale regressions on the 64×64 phantom with the reduced 32-channel network.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use diptv::degradation::{add_awgn, DegradationOperator, NoiseSpec};
use diptv::generator::{GeneratorConfig, Task};
use diptv::io::ImageFile;
use diptv::pipeline::{restore, Method, RestoreConfig};
use diptv::tensor::Tensor;

const SEEDS: [u64; 3] = [1, 2, 3];

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn loss_decreases_over_every_500_step_window_in_median() {
    let clean: Tensor<f32> = ImageFile::load(data("phantom64.png")).unwrap().to_tensor(255.0);
    let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for seed in SEEDS {
        let y = add_awgn(&clean, NoiseSpec { sigma: 50.0, seed: 7000 + seed }).unwrap().map(|v| v / 255.0);
        let cfg = RestoreConfig {
            lambda: 0.2,
            steps: 1000,
            seed,
            log_every: 50,
            generator: GeneratorConfig::uniform(5, 32, 4),
            ..RestoreConfig::for_task(Task::Denoise, Method::DipTv)
        };
        let r = restore(&y, &DegradationOperator::Identity, &cfg, None).unwrap();
        for p in r.trace {
            by_step.entry(p.step).or_default().push(p.loss);
        }
    }
    let windows: Vec<_> = by_step.keys().copied().filter(|t| by_step.contains_key(&(t + 500))).collect();
    assert!(windows.len() >= 10);
    for t in windows {
        let drops: Vec<f64> = by_step[&t].iter().zip(&by_step[&(t + 500)]).map(|(a, b)| b - a).collect();
        assert!(median(drops.clone()) < 0.0, "window starting at {t}: {drops:?}");
    }
}

fn field(stdout: &[u8], key: &str) -> f64 {
    let text = String::from_utf8_lossy(stdout);
    let start = text.find(&format!("{key}=")).unwrap_or_else(|| panic!("no {key} in {text}")) + key.len() + 1;
    text[start..].split(|c: char| c == ',' || c.is_whitespace()).next().unwrap().parse().unwrap()
}

#[test]
fn cli_dip_tv_defaults_beat_the_noisy_input() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_diptv");
    let clean = data("phantom64.png");
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let noisy = dir.path().join(format!("y{seed}.png"));
        let out = dir.path().join(format!("x{seed}.png"));
        let seed = seed.to_string();
        let p = |p: &Path| p.to_str().unwrap().to_string();
        let o = Command::new(bin)
            .args(["degrade", "--input", &p(&clean), "--output", &p(&noisy), "--sigma", "50", "--seed", &seed])
            .output()
            .unwrap();
        assert!(o.status.success());
        let o = Command::new(bin)
            .args(["evaluate", "--reference", &p(&clean), "--estimate", &p(&noisy)])
            .output()
            .unwrap();
        before.push(field(&o.stdout, "snr_db"));
        let o = Command::new(bin)
            .args(["restore", "--input", &p(&noisy), "--output", &p(&out), "--reference", &p(&clean)])
            .args(["--seed", &seed, "--steps", "500", "--depth", "5", "--channels", "32"])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        after.push(field(&o.stdout, "snr_db"));
    }
    assert!(median(after.clone()) > median(before.clone()), "{before:?} -> {after:?}");
}
