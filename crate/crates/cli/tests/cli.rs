use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mcse_core::dsp::read_wav;

fn mcse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcse"))
        .current_dir(dir)
        .env_remove("MCSE_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = mcse(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn fails_with(dir: &Path, args: &[&str], code: i32) -> String {
    let o = mcse(dir, args);
    assert_eq!(o.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stderr).unwrap()
}

/// A tiny desk corpus: 4 train and 2 dev clips of 0.5 s.
fn corpus(dir: &Path) {
    ok(dir, &["--preset", "desk", "simulate", "--out", "tr", "--count", "4", "--seed", "3", "--seconds", "0.5"]);
    ok(dir, &["--preset", "desk", "simulate", "--out", "dv", "--count", "2", "--seed", "4", "--split", "dev", "--seconds", "0.5"]);
}

fn train_m5(dir: &Path, out: &str, epochs: &str) {
    ok(dir, &["--preset", "desk", "train", "--train-data", "tr", "--dev-data", "dv", "--variant", "M5", "--epochs", epochs, "--out", out]);
}

#[test]
fn simulate_is_deterministic_and_creates_dirs() {
    let d = tempfile::tempdir().unwrap();
    for out in ["a/nested", "b"] {
        ok(d.path(), &["--preset", "desk", "simulate", "--out", out, "--count", "3", "--seed", "7", "--seconds", "0.25"]);
    }
    let read = |p: &str| fs::read(d.path().join(p)).unwrap();
    assert_eq!(read("a/nested/manifest.jsonl"), read("b/manifest.jsonl"));
    assert_eq!(read("a/nested/mix/train_00002.wav"), read("b/mix/train_00002.wav"));
    assert!(d.path().join("b/config.resolved.toml").exists());
    let err = fails_with(d.path(), &["simulate", "--out", "c", "--count", "0"], 1);
    assert!(err.contains("count"), "{err}");
}

#[test]
fn train_variants_and_resume() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    corpus(p);
    let err = fails_with(p, &["--preset", "desk", "train", "--train-data", "tr", "--variant", "Proposed", "--out", "r"], 1);
    assert!(err.contains("--am-checkpoint"), "{err}");
    let err = fails_with(p, &["--preset", "desk", "train", "--train-data", "tr", "--variant", "M9"], 1);
    assert!(err.contains("B1-features") && err.contains("Proposed"), "{err}");

    train_m5(p, "m5", "1");
    for f in ["last.ckpt", "best.ckpt", "train_log.jsonl", "dev_epoch001.csv", "config.resolved.toml"] {
        assert!(p.join("m5").join(f).exists(), "{f}");
    }
    ok(p, &["--preset", "desk", "train", "--train-data", "tr", "--variant", "M5", "--epochs", "2", "--out", "m5", "--resume"]);
    let log = fs::read_to_string(p.join("m5/train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![1, 2]);

    ok(p, &["--preset", "desk", "pretrain-am", "--data", "tr", "--out", "am/am.ckpt", "--epochs", "2"]);
    ok(p, &["--preset", "desk", "train", "--train-data", "tr", "--variant", "Proposed", "--am-checkpoint", "am/am.ckpt", "--epochs", "1", "--out", "prop"]);
    assert!(p.join("prop/last.ckpt").exists());
}

#[test]
fn enhance_evaluate_inspect() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    corpus(p);
    train_m5(p, "m5", "1");

    ok(p, &["enhance", "--in", "tr/mix/train_00001.wav", "--model", "m5/best.ckpt", "--out", "e/out.wav", "--dump-mask", "e/mask.csv"]);
    let input = read_wav(&p.join("tr/mix/train_00001.wav")).unwrap();
    let out = read_wav(&p.join("e/out.wav")).unwrap();
    assert_eq!((out.num_channels(), out.len()), (1, input.len()));
    let mask = fs::read_to_string(p.join("e/mask.csv")).unwrap();
    let rows: Vec<&str> = mask.lines().collect();
    // desk framing: 33 bins; 8000 samples at hop 32
    assert_eq!(rows.len(), 33);
    assert!(rows.iter().all(|r| r.split(',').count() == rows[0].split(',').count()));
    let err = fails_with(p, &["enhance", "--in", "e/out.wav", "--model", "m5/best.ckpt", "--out", "e/x.wav"], 1);
    assert!(err.contains("channels"), "{err}");

    let o = Command::new(env!("CARGO_BIN_EXE_mcse"))
        .current_dir(p)
        .env("MCSE_THREADS", "2")
        .args(["evaluate", "--manifest", "dv/manifest.jsonl", "--model", "m5/best.ckpt", "--out", "rep/r.csv", "--spectrogram-dump", "rep/spec"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(p.join("rep/r.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.contains("noisy_si_snr_db") && header.contains("enhanced_si_snr_db"));
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
    assert!(p.join("rep/r.json").exists());
    for kind in ["clean", "noisy", "enhanced"] {
        assert!(p.join(format!("rep/spec/dev_00001_{kind}.csv")).exists());
    }
    fs::create_dir(p.join("empty")).unwrap();
    fs::write(p.join("empty/manifest.jsonl"), "").unwrap();
    fails_with(p, &["evaluate", "--manifest", "empty", "--model", "m5/best.ckpt", "--out", "x.csv"], 1);

    let stdout = ok(p, &["inspect-features", "--in", "tr/mix/train_00000.wav", "--model", "m5/best.ckpt", "--panel", "fusion3", "--out", "insp"]);
    assert!(stdout.contains("fusion3"));
    assert!(p.join("insp/fusion3_p7.csv").exists());
    assert!(!p.join("insp/fusion1_p0.csv").exists());
    fails_with(p, &["inspect-features", "--in", "tr/mix/train_00000.wav", "--model", "m5/best.ckpt", "--panel", "nope"], 1);
}

#[test]
fn config_file_flags_and_env() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("c.toml"), "[train]\nepochs = 7\nbatch_size = 2\n").unwrap();
    let out = ok(p, &["--preset", "desk", "--config", "c.toml", "config"]);
    let back: toml::Table = out.parse().unwrap();
    assert_eq!(back["train"]["epochs"].as_integer(), Some(7));
    assert_eq!(back["train"]["batch_size"].as_integer(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_mcse"))
        .current_dir(p)
        .env("MCSE_THREADS", "3")
        .args(["--preset", "desk", "config"])
        .output()
        .unwrap();
    let t: toml::Table = String::from_utf8(o.stdout).unwrap().parse().unwrap();
    assert_eq!(t["train"]["threads"].as_integer(), Some(3));
    // flags beat the environment
    let o = Command::new(env!("CARGO_BIN_EXE_mcse"))
        .current_dir(p)
        .env("MCSE_THREADS", "3")
        .args(["--preset", "desk", "--threads", "1", "config"])
        .output()
        .unwrap();
    let t: toml::Table = String::from_utf8(o.stdout).unwrap().parse().unwrap();
    assert_eq!(t["train"]["threads"].as_integer(), Some(1));

    fs::write(p.join("bad.toml"), "[train]\nepohcs = 7\n").unwrap();
    let err = fails_with(p, &["--config", "bad.toml", "config"], 1);
    assert!(err.contains("epohcs"), "{err}");
    fails_with(p, &["no-such-command"], 1);
}

#[test]
fn selftest_fast_passes() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["selftest", "--fast"]);
    assert!(out.contains("stft-roundtrip") && out.contains("bmuf-degenerate"));
    assert!(!out.contains("FAIL"));
    assert!(out.contains("SKIP"));
}
