//! Quick built-in verification suites: framing round trip, beamformer
//! constraint, gradient checks and the degenerate BMUF trajectory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dsp::{FrameParams, Stft, Waveform};
use crate::error::Result;
use crate::frontend::Variant;
use crate::losses::LossWeights;
use crate::model::{EnhancementModel, ModelConfig};
use crate::nn::{Adam, Precision};
use crate::spatial::{sdbf_weights, ArrayGeometry};
use crate::train::{bmuf_round, grad_check, train_step, Batch, BmufConfig, BmufState, Example, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    /// Measured quantity and its bound, human readable.
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let start = std::time::Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    SuiteResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn random_signal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Max interior reconstruction error over `count` random 1-3 s signals.
pub fn stft_roundtrip(count: usize, seed: u64) -> Result<f64> {
    let params = FrameParams::paper();
    let stft = Stft::new(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let n = rng.random_range(16_000..=48_000);
        let x = random_signal(&mut rng, n);
        let y = stft.inverse(&stft.forward(&x)?, Some(n))?;
        for i in params.win_len..n - params.win_len {
            worst = worst.max((x[i] - y[i]).abs());
        }
    }
    Ok(worst)
}

/// Largest `|d^H w - 1|` over all bins of the default 7-direction beamformer.
pub fn sdbf_constraint() -> Result<f64> {
    let geom = ArrayGeometry::default();
    let params = FrameParams::paper();
    let mut worst = 0.0f64;
    for i in 1..=7 {
        let theta = i as f64 * std::f64::consts::PI / 8.0;
        worst = worst.max(sdbf_weights(&geom, theta, &params, 1e-3, &[0, 1])?.max_constraint_error());
    }
    Ok(worst)
}

fn tiny_model(variant: Variant, precision: Precision, seed: u64) -> Result<EnhancementModel> {
    let mut cfg = ModelConfig::desk(variant, FrameParams::new(16_000, 32, 32)?);
    cfg.frontend.projection_dim = 16;
    EnhancementModel::new(&cfg, precision, seed)
}

fn random_examples(model: &EnhancementModel, count: usize, samples: usize, seed: u64) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let target = random_signal(&mut rng, samples);
            let chans = (0..8)
                .map(|_| target.iter().map(|t| 0.7 * t + 0.3 * rng.random_range(-1.0..1.0)).collect())
                .collect();
            let mix = Waveform::new(16_000, chans)?;
            Example::prepare(model, format!("r{i}"), &mix, target, None)
        })
        .collect()
}

/// Worst relative gradient error of a tiny 64-bit two-stage model.
pub fn model_gradcheck(seed: u64) -> Result<f64> {
    let model = tiny_model(Variant::M5, Precision::F64, seed)?;
    let ex = random_examples(&model, 2, 256, seed)?;
    let batch = Batch::collate(&ex.iter().collect::<Vec<_>>())?;
    let w = LossWeights { alpha: 1.0, beta: 0.0 };
    Ok(grad_check(&model, None, &batch, w, 1e-5, 0, seed)?.max_rel_error)
}

/// Runs serial Adam and single-worker BMUF with `eta = 0, zeta = 1` side by
/// side; returns the number of sync points that matched bit for bit and the
/// total number of sync points.
pub fn bmuf_degenerate(steps: usize, sync_period: usize, seed: u64) -> Result<(usize, usize)> {
    let model = tiny_model(Variant::M5, Precision::F32, seed)?;
    let ex = random_examples(&model, 4, 256, seed)?;
    let batches: Vec<Batch> = ex
        .chunks(2)
        .map(|c| Batch::collate(&c.iter().collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let cfg = TrainConfig::default();
    let bcfg = BmufConfig {
        workers: 1,
        sync_period,
        block_momentum: 0.0,
        block_lr: 1.0,
        ..Default::default()
    };
    let mut serial = model.clone();
    let mut serial_adam = Adam::new(cfg.adam, &serial.store);
    let mut global = model.clone();
    let mut worker = model;
    let mut worker_adam = Adam::new(cfg.adam, &worker.store);
    let mut st = BmufState::new(bcfg, &global.store)?;
    let (mut matched, mut syncs) = (0, 0);
    for step in 0..steps {
        let b = &batches[step % batches.len()];
        train_step(b, &mut serial, None, &mut serial_adam, &cfg)?;
        train_step(b, &mut worker, None, &mut worker_adam, &cfg)?;
        if (step + 1) % sync_period == 0 {
            bmuf_round(&mut st, &mut global.store, &[&worker.store])?;
            syncs += 1;
            matched += usize::from(global.store.bit_equal(&serial.store));
            worker.store.copy_values_from(&st.restart_point(&global.store))?;
        }
    }
    Ok((matched, syncs))
}

/// Runs every suite; `fast` skips the gradient check.
pub fn run_all(fast: bool) -> Vec<SuiteResult> {
    let mut out = vec![
        timed("stft-roundtrip", || {
            let e = stft_roundtrip(20, 1)?;
            Ok((e <= 1e-6, format!("max interior error {e:.2e} (<= 1e-6)")))
        }),
        timed("sdbf-distortionless", || {
            let e = sdbf_constraint()?;
            Ok((e <= 1e-10, format!("max |d^H w - 1| {e:.2e} (<= 1e-10)")))
        }),
    ];
    if !fast {
        out.push(timed("gradient-check", || {
            let e = model_gradcheck(3)?;
            Ok((e <= 1e-4, format!("max relative error {e:.2e} (<= 1e-4)")))
        }));
    }
    out.push(timed("bmuf-degenerate", || {
        let (m, n) = bmuf_degenerate(20, 4, 2)?;
        Ok((m == n, format!("{m}/{n} sync points bit-identical")))
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suites_pass() {
        for r in run_all(true) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
