use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use log::info;
use mcse_core::am::pretrain_am;
use mcse_core::dsp::{lps, read_wav, write_frame_major_csv, write_wav, WavFormat, Waveform, LPS_FLOOR};
use mcse_core::frontend::{shape_table, Variant};
use mcse_core::metrics::{score, MetricReport, UtteranceScores};
use mcse_core::model::EnhancementModel;
use mcse_core::nn::layers::Mode;
use mcse_core::nn::{Graph, Tensor};
use mcse_core::room::dataset::{load_example, load_manifest, make_dataset, ManifestEntry, Split, MANIFEST};
use mcse_core::selftest;
use mcse_core::train::{run_training, LAST_CKPT};
use serde::Serialize;

use crate::config::ToolkitConfig;
use crate::{Cli, Command, UserError};

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    s.parse::<Variant>().map_err(|e| user(e.to_string()))
}

pub fn run(cli: &Cli) -> Result<u8> {
    let mut cfg = ToolkitConfig::load(cli.preset, cli.config.as_deref())?;
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(user("thread count must be at least 1"));
        }
        cfg.train.threads = t;
    }
    let threads = cfg.train.threads.max(1);
    match &cli.command {
        Command::Simulate(a) => simulate(cfg, a),
        Command::PretrainAm(a) => pretrain(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Enhance(a) => enhance(a),
        Command::Evaluate(a) => evaluate(a, threads),
        Command::InspectFeatures(a) => inspect(cfg, a),
        Command::Selftest(a) => Ok(selftest_cmd(a)),
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml()?);
            Ok(0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Clip length in seconds for the chosen split.
    #[arg(long)]
    seconds: Option<f64>,
    /// Directory of clean 16 kHz WAVs (default: built-in generator).
    #[arg(long)]
    clean_dir: Option<PathBuf>,
    #[arg(long)]
    noise_dir: Option<PathBuf>,
}

fn simulate(mut cfg: ToolkitConfig, a: &SimulateArgs) -> Result<u8> {
    let r = &mut cfg.dataset;
    if let Some(c) = a.count {
        r.count = c;
    }
    if let Some(s) = a.seed {
        r.seed = s;
    }
    if let Some(s) = a.split {
        r.split = match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
        };
    }
    if let Some(s) = a.seconds {
        match r.split {
            Split::Train => r.train_seconds = s,
            Split::Dev => r.dev_seconds = s,
        }
    }
    if a.clean_dir.is_some() {
        r.clean_dir = a.clean_dir.clone();
    }
    if a.noise_dir.is_some() {
        r.noise_dir = a.noise_dir.clone();
    }
    cfg.validate()?;
    let entries = make_dataset(&cfg.dataset, &a.out)?;
    cfg.echo(&a.out)?;
    println!("wrote {} examples to {}", entries.len(), a.out.display());
    Ok(0)
}

/// Dataset root from a directory or a path to its manifest.
fn dataset_root(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.to_path_buf()
    } else {
        parent_dir(p)
    }
}

fn read_manifest(p: &Path) -> Result<(PathBuf, Vec<ManifestEntry>)> {
    let root = dataset_root(p);
    let entries = load_manifest(&root.join(MANIFEST)).with_context(|| format!("reading manifest in {}", root.display()))?;
    if entries.is_empty() {
        return Err(user(format!("manifest in {} lists no examples", root.display())));
    }
    Ok((root, entries))
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Corpus whose targets serve as clean speech.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint (model + codebook).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn pretrain(mut cfg: ToolkitConfig, a: &PretrainArgs) -> Result<u8> {
    if let Some(e) = a.epochs {
        cfg.am.max_epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.am.seed = s;
    }
    cfg.validate()?;
    let (root, entries) = read_manifest(&a.data)?;
    let clean: Vec<Vec<f64>> = entries
        .iter()
        .map(|e| Ok(load_example(&root, e)?.1))
        .collect::<Result<_>>()?;
    let stft = std::sync::Arc::new(mcse_core::dsp::Stft::new(cfg.model.frame)?);
    let (am, book, report) = pretrain_am(&clean, &stft, &cfg.am)?;
    if let Some(d) = a.out.parent() {
        fs::create_dir_all(d)?;
    }
    am.save(&book, &a.out)?;
    cfg.echo(&parent_dir(&a.out))?;
    println!(
        "acoustic model: {} epochs, loss {:.4}, frame accuracy {:.4} -> {}",
        report.epochs,
        report.final_loss,
        report.final_accuracy,
        a.out.display()
    );
    Ok(0)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    dev_data: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// One of B1-features, B2, M1..M5, Proposed.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    am_checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a training checkpoint (default: <out>/last.ckpt).
    #[arg(long)]
    resume: Option<Option<PathBuf>>,
    /// Simulated BMUF workers; serial Adam when absent.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    sync_period: Option<usize>,
    #[arg(long)]
    block_momentum: Option<f64>,
    #[arg(long)]
    block_lr: Option<f64>,
    #[arg(long)]
    nesterov: bool,
}

fn train(mut cfg: ToolkitConfig, a: &TrainArgs) -> Result<u8> {
    let t = &mut cfg.train;
    if let Some(v) = &a.variant {
        cfg.model.variant = parse_variant(v)?;
    }
    if a.train_data.is_some() {
        t.train_data = a.train_data.clone();
    }
    if a.dev_data.is_some() {
        t.dev_data = a.dev_data.clone();
    }
    if let Some(o) = &a.out {
        t.out_dir = o.clone();
    }
    if a.am_checkpoint.is_some() {
        t.am_checkpoint = a.am_checkpoint.clone();
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = a.lr {
        t.adam.lr = lr;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if a.workers.is_some() || a.sync_period.is_some() || a.block_momentum.is_some() || a.block_lr.is_some() || a.nesterov {
        let mut b = t.bmuf.unwrap_or_default();
        b.workers = a.workers.unwrap_or(b.workers);
        b.sync_period = a.sync_period.unwrap_or(b.sync_period);
        b.block_momentum = a.block_momentum.unwrap_or(b.block_momentum);
        b.block_lr = a.block_lr.unwrap_or(b.block_lr);
        b.nesterov |= a.nesterov;
        t.bmuf = Some(b);
    }
    cfg.validate()?;
    if cfg.train.train_data.is_none() {
        return Err(user("no training data: pass --train-data or set train.train_data"));
    }
    if cfg.model.variant.uses_am() && cfg.train.loss.beta > 0.0 && cfg.train.am_checkpoint.is_none() {
        return Err(user(format!(
            "variant {} trains with the acoustic-model loss; pass --am-checkpoint (see `mcse pretrain-am`) or set train.loss.beta = 0",
            cfg.model.variant
        )));
    }
    let resume = a
        .resume
        .as_ref()
        .map(|p| p.clone().unwrap_or_else(|| cfg.train.out_dir.join(LAST_CKPT)));
    if let Some(r) = &resume {
        if !r.exists() {
            return Err(user(format!("no checkpoint to resume at {}", r.display())));
        }
    }
    cfg.echo(&cfg.train.out_dir)?;
    let summary = run_training(&cfg.model, &cfg.train, resume.as_deref())?;
    let last = summary.epoch_losses.last();
    println!(
        "ran {} epochs (step {} overall); last train loss {}; best dev {}",
        summary.epochs,
        summary.steps,
        last.map_or("n/a".into(), |l| format!("{:.4}", l.l_total)),
        summary.best.map_or("n/a".into(), |(e, s)| format!("{s:.3} dB at epoch {e}"))
    );
    Ok(0)
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    /// Multi-channel input WAV at the model's sample rate.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write the mask magnitude as CSV (one row per bin, one column per frame).
    #[arg(long)]
    dump_mask: Option<PathBuf>,
}

/// `|M|` of mask planes `[2F, T]` as F rows of T values.
fn write_mask_csv(path: &Path, mask: &Tensor) -> Result<()> {
    let (f2, t) = (mask.shape()[0], mask.shape()[1]);
    let f = f2 / 2;
    let d = mask.data();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).ok();
    }
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for k in 0..f {
        let row: Vec<String> = (0..t)
            .map(|ti| format!("{}", d[k * t + ti].hypot(d[(k + f) * t + ti])))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn enhance(a: &EnhanceArgs) -> Result<u8> {
    let model = EnhancementModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let input = read_wav(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let (y, mask) = model.enhance_with_mask(&input)?;
    if let Some(d) = a.out.parent() {
        fs::create_dir_all(d).ok();
    }
    write_wav(&a.out, &Waveform::mono(input.sample_rate(), y)?, WavFormat::Float32)?;
    if let Some(p) = &a.dump_mask {
        write_mask_csv(p, &mask)?;
    }
    println!("enhanced {:.2} s -> {}", input.duration_secs(), a.out.display());
    Ok(0)
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Corpus directory or its manifest.jsonl.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Report CSV; a JSON copy is written alongside.
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-utterance LPS CSVs (clean, noisy, enhanced).
    #[arg(long)]
    spectrogram_dump: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalReport {
    model: String,
    noisy: MetricReport,
    enhanced: MetricReport,
}

fn dump_lps(dir: &Path, id: &str, model: &EnhancementModel, signals: [(&str, &[f64]); 3]) -> Result<()> {
    for (name, x) in signals {
        let map = lps(&model.stft().forward(x)?, LPS_FLOOR)?;
        write_frame_major_csv(&dir.join(format!("{id}_{name}.csv")), &map)?;
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs, threads: usize) -> Result<u8> {
    let model = EnhancementModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let (root, entries) = read_manifest(&a.manifest)?;
    let sr = model.config.frame.sample_rate;
    let one = |e: &ManifestEntry| -> Result<(UtteranceScores, UtteranceScores)> {
        let (mix, target) = load_example(&root, e)?;
        let noisy = mix.channel(0);
        let y = model.enhance(&mix)?;
        if let Some(d) = &a.spectrogram_dump {
            dump_lps(d, &e.id, &model, [("clean", &target), ("noisy", noisy), ("enhanced", &y)])?;
        }
        Ok((score(&e.id, &target, noisy, sr)?, score(&e.id, &target, &y, sr)?))
    };
    let chunk = entries.len().div_ceil(threads);
    let results: Vec<Result<(UtteranceScores, UtteranceScores)>> = std::thread::scope(|s| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(one).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let (mut noisy, mut enhanced) = (Vec::new(), Vec::new());
    for r in results {
        let (n, e) = r?;
        noisy.push(n);
        enhanced.push(e);
    }
    let report = EvalReport {
        model: a.model.display().to_string(),
        noisy: MetricReport::new("noisy", noisy),
        enhanced: MetricReport::new(model.variant().id(), enhanced),
    };
    if let Some(d) = a.out.parent() {
        fs::create_dir_all(d).ok();
    }
    fs::write(&a.out, eval_csv(&report))?;
    fs::write(a.out.with_extension("json"), serde_json::to_string_pretty(&report)?)?;
    let (n, e) = (&report.noisy.mean, &report.enhanced.mean);
    println!("             SI-SNR    STOI   E-STOI");
    println!("noisy     {:8.3} {:7.4} {:8.4}", n.si_snr, n.stoi, n.estoi);
    println!("enhanced  {:8.3} {:7.4} {:8.4}", e.si_snr, e.stoi, e.estoi);
    Ok(0)
}

fn eval_csv(r: &EvalReport) -> String {
    let mut s = String::from("utterance,noisy_si_snr_db,noisy_stoi,noisy_estoi,enhanced_si_snr_db,enhanced_stoi,enhanced_estoi\n");
    let row = |id: &str, n: [f64; 3], e: [f64; 3]| {
        format!("{id},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n", n[0], n[1], n[2], e[0], e[1], e[2])
    };
    for (n, e) in r.noisy.utterances.iter().zip(&r.enhanced.utterances) {
        s += &row(&n.id, [n.si_snr, n.stoi, n.estoi], [e.si_snr, e.stoi, e.estoi]);
    }
    let (n, e) = (&r.noisy.mean, &r.enhanced.mean);
    s += &row("mean", [n.si_snr, n.stoi, n.estoi], [e.si_snr, e.stoi, e.estoi]);
    s
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Multi-channel input WAV.
    #[arg(long = "in")]
    input: PathBuf,
    /// Trained model; a freshly initialized one from the config otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Panels to dump (all when omitted), e.g. `fusion1`, `icd`, `sdbf_lps`.
    #[arg(long = "panel")]
    panels: Vec<String>,
    /// Output directory for `<name>_p<k>.csv` files (frame-major rows).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn inspect(mut cfg: ToolkitConfig, a: &InspectArgs) -> Result<u8> {
    let model = match &a.model {
        Some(p) => EnhancementModel::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            if let Some(v) = &a.variant {
                cfg.model.variant = parse_variant(v)?;
            }
            cfg.validate()?;
            EnhancementModel::new(&cfg.model, cfg.train.precision, a.seed)?
        }
    };
    let input = read_wav(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let x = model.batch(&[&input])?;
    let fixed = model.features(&x)?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, &x, &fixed, Mode::Eval)?;
    for (name, p, h) in shape_table(model.variant(), &model.config.frontend, &model.config.frame)? {
        println!("expected {name:<12} {p:>3} panels x {h:>4}");
    }
    let known: Vec<&str> = out.intermediates.iter().map(|(n, _)| n.as_str()).collect();
    if let Some(bad) = a.panels.iter().find(|p| !known.contains(&p.as_str())) {
        bail!(UserError(format!("no panel '{bad}'; available: {}", known.join(", "))));
    }
    for (name, v) in &out.intermediates {
        let t = g.value(*v);
        println!("{name:<12} {:?}", t.shape());
        let Some(dir) = &a.out else { continue };
        if !a.panels.is_empty() && !a.panels.contains(name) {
            continue;
        }
        let s = t.shape();
        match s.len() {
            // [1, P, H, T]
            4 => {
                let plane = s[2] * s[3];
                for k in 0..s[1] {
                    let m = Tensor::new(&[s[2], s[3]], t.data()[k * plane..(k + 1) * plane].to_vec())?;
                    write_frame_major_csv(&dir.join(format!("{name}_p{k}.csv")), &m)?;
                }
            }
            _ => write_frame_major_csv(&dir.join(format!("{name}.csv")), t)?,
        }
    }
    info!("flattened frontend output feeds a {}-dim TCN input", model.config.tcn.input_dim);
    Ok(0)
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    /// Skip the gradient-check suite.
    #[arg(long)]
    fast: bool,
}

fn selftest_cmd(a: &SelftestArgs) -> u8 {
    let results = selftest::run_all(a.fast);
    println!("{:<22} {:<6} {:>8}  detail", "suite", "result", "seconds");
    for r in &results {
        println!(
            "{:<22} {:<6} {:>8.2}  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
    }
    if a.fast {
        println!("{:<22} {:<6}", "gradient-check", "SKIP");
    }
    if results.iter().all(|r| r.passed) {
        0
    } else {
        2
    }
}
