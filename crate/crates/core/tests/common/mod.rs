//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::PathBuf;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// 32-bit linear congruential generator, mirrored in the fixture script.
pub struct Lcg(u32);

impl Lcg {
    pub fn new(seed: u32) -> Self {
        Lcg(seed)
    }

    pub fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(1664525).wrapping_add(1013904223);
        self.0 as f64 / 4294967296.0
    }
}

/// `(clean, noisy, snr_db)` speech-shaped pair, identical to
/// `gen_stoi_reference.py`.
pub fn stoi_signals(seed: u32, n: usize, fs: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let mut r = Lcg::new(seed);
    let f0 = 90.0 + 120.0 * r.next();
    let rate = 3.0 + 2.0 * r.next();
    let pe = 2.0 * PI * r.next();
    let ph: Vec<f64> = (0..10).map(|_| 2.0 * PI * r.next()).collect();
    let snr = -5.0 + 20.0 * r.next();
    let clean: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let env = (2.0 * PI * rate * t + pe).sin().max(0.0).powi(2);
            let mut v = 0.0;
            for h in 1..=10 {
                let hf = h as f64;
                v += (0.6 + 0.4 * (2.0 * PI * 0.7 * hf * t).sin()) * (2.0 * PI * hf * f0 * t + ph[h - 1]).sin() / hf;
            }
            env * v
        })
        .collect();
    let mut prev = 0.0;
    let noise: Vec<f64> = (0..n)
        .map(|_| {
            prev = (2.0 * r.next() - 1.0) + 0.7 * prev;
            prev
        })
        .collect();
    let pc: f64 = clean.iter().map(|v| v * v).sum();
    let pn: f64 = noise.iter().map(|v| v * v).sum();
    let gain = (pc / pn / 10f64.powf(snr / 10.0)).sqrt();
    let noisy = clean.iter().zip(&noise).map(|(c, n)| c + gain * n).collect();
    (clean, noisy, snr)
}

#[derive(serde::Deserialize)]
pub struct StoiCase {
    pub seed: u32,
    pub snr_db: f64,
    pub stoi: f64,
    pub estoi: f64,
}

#[derive(serde::Deserialize)]
pub struct StoiReference {
    pub sample_rate: u32,
    pub samples: usize,
    pub cases: Vec<StoiCase>,
}

pub fn stoi_reference() -> StoiReference {
    let s = std::fs::read_to_string(fixture("stoi_reference.json")).expect("fixture");
    serde_json::from_str(&s).expect("fixture json")
}

pub mod desk {
    use mcse_core::am::{lps_frames, AcousticModel, Codebook, TdnnConfig};
    use mcse_core::dsp::{lps, FrameParams, Waveform, LPS_FLOOR};
    use mcse_core::frontend::Variant;
    use mcse_core::model::{EnhancementModel, ModelConfig};
    use mcse_core::nn::Precision;
    use mcse_core::room::dataset::{generate_example, DatasetRecipe, Pools};
    use mcse_core::train::{Example, FrozenAm};

    pub fn tiny_frame() -> FrameParams {
        FrameParams::new(16_000, 32, 32).unwrap()
    }

    pub fn tiny_config(v: Variant) -> ModelConfig {
        let mut cfg = ModelConfig::desk(v, tiny_frame());
        cfg.frontend.projection_dim = 16;
        cfg
    }

    pub fn tiny_model(v: Variant, precision: Precision, seed: u64) -> EnhancementModel {
        EnhancementModel::new(&tiny_config(v), precision, seed).unwrap()
    }

    /// Short simulated recipe: low image order, moderate SNR.
    pub fn recipe(samples: usize, seed: u64) -> DatasetRecipe {
        let mut r = DatasetRecipe {
            seed,
            train_seconds: samples as f64 / 16_000.0,
            ..Default::default()
        };
        r.scene.max_order = 2;
        r.scene.snr_range = [0.0, 10.0];
        r.augment.probability = 0.0;
        r
    }

    pub fn mixtures(n: usize, samples: usize, seed: u64) -> Vec<(Waveform, Vec<f64>)> {
        let r = recipe(samples, seed);
        (0..n)
            .map(|i| {
                let g = generate_example(&r, &Pools::synthetic(), r.example_seed(i)).unwrap();
                (g.example.mixture, g.example.target)
            })
            .collect()
    }

    /// Randomly initialized frozen AM over the model's bins with a codebook
    /// fitted to the targets.
    pub fn tiny_am(model: &EnhancementModel, data: &[(Waveform, Vec<f64>)], seed: u64) -> FrozenAm {
        let bins = model.config.frame.bins();
        let cfg = TdnnConfig {
            num_blocks: 2,
            hidden: 12,
            bottleneck: 6,
            num_classes: 6,
            ..TdnnConfig::desk(bins)
        };
        let frames: Vec<Vec<f64>> = data
            .iter()
            .flat_map(|(_, t)| lps_frames(&lps(&model.stft().forward(t).unwrap(), LPS_FLOOR).unwrap()))
            .collect();
        let book = Codebook::train(&frames, cfg.num_classes, 10, seed).unwrap();
        FrozenAm::new(AcousticModel::new(&cfg, seed).unwrap(), book)
    }

    pub fn examples(model: &EnhancementModel, data: &[(Waveform, Vec<f64>)], am: Option<&FrozenAm>) -> Vec<Example> {
        data.iter()
            .enumerate()
            .map(|(i, (m, t))| Example::prepare(model, format!("u{i}"), m, t.clone(), am).unwrap())
            .collect()
    }
}
