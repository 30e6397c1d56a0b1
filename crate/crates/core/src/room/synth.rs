//! Built-in sources so the pipeline runs without external corpora.
//!
//! Speech-like: syllables of a glottal-like harmonic series (90–220 Hz
//! fundamental with jitter-free vibrato) shaped by two or three formant
//! resonances, with unvoiced noise bursts and pauses. Noise: stationary
//! coloured noise (one-pole shaping of white noise plus optional hum).

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Formant gain at frequency `f` for resonances `(centre, bandwidth)`.
fn formant_gain(f: f64, formants: &[(f64, f64)]) -> f64 {
    formants
        .iter()
        .map(|&(c, bw)| 1.0 / (1.0 + ((f - c) / bw).powi(2)))
        .sum::<f64>()
        + 0.02
}

/// Speech-like signal of `n` samples with unit peak-ish level.
pub fn speech_like(rng: &mut impl Rng, n: usize, sample_rate: u32) -> Vec<f64> {
    let fs = sample_rate as f64;
    let nyq = fs / 2.0;
    let mut out = vec![0.0; n];
    let base_f0 = rng.random_range(90.0..220.0);
    // leading pause, kept within the first quarter so short clips are not silent
    let mut pos = ((rng.random_range(0.0..0.15) * fs) as usize).min(n / 4);
    while pos < n {
        let dur = (rng.random_range(0.12..0.32) * fs) as usize;
        let end = (pos + dur).min(n);
        let len = end - pos;
        let voiced = rng.random::<f64>() < 0.8;
        let amp = rng.random_range(0.3..1.0);
        if voiced {
            let f0 = base_f0 * rng.random_range(0.85..1.2);
            let glide = rng.random_range(-0.2..0.2);
            let formants: Vec<(f64, f64)> = [(300.0, 900.0), (900.0, 2500.0), (2200.0, 3500.0)]
                .iter()
                .map(|&(lo, hi)| (rng.random_range(lo..hi), rng.random_range(60.0..160.0)))
                .collect();
            let harmonics = ((nyq * 0.9) / (f0 * 1.2)) as usize;
            let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            let mut phase = 0.0;
            for i in 0..len {
                let u = i as f64 / len as f64;
                let f = f0 * (1.0 + glide * u);
                phase += 2.0 * PI * f / fs;
                let env = (PI * u).sin().powi(2);
                let mut v = 0.0;
                for (h, ph) in phases.iter().enumerate() {
                    let hf = (h + 1) as f64;
                    if hf * f >= nyq * 0.95 {
                        break;
                    }
                    v += formant_gain(hf * f, &formants) * (hf * phase + ph).sin() / hf.sqrt();
                }
                out[pos + i] += amp * env * v * 0.3;
            }
        } else {
            // unvoiced: high-passed noise burst
            let mut prev = 0.0;
            for i in 0..len {
                let u = i as f64 / len as f64;
                let w: f64 = StandardNormal.sample(rng);
                let hp = w - prev;
                prev = w;
                out[pos + i] += amp * 0.15 * (PI * u).sin() * hp;
            }
        }
        let gap = (rng.random_range(0.03..0.25) * fs) as usize;
        pos = end + gap;
    }
    out
}

/// Stationary coloured noise: white noise through a random one-pole
/// low-pass/high-pass blend, optionally with mains-like hum.
pub fn colored_noise(rng: &mut impl Rng, n: usize, sample_rate: u32) -> Vec<f64> {
    let fs = sample_rate as f64;
    let pole = rng.random_range(0.0..0.95);
    let tilt = rng.random_range(0.0..1.0);
    let hum = if rng.random::<f64>() < 0.3 {
        Some((rng.random_range(50.0..120.0), rng.random_range(0.05..0.3)))
    } else {
        None
    };
    let mut lp = 0.0;
    let mut prev = 0.0;
    (0..n)
        .map(|i| {
            let w: f64 = StandardNormal.sample(rng);
            lp = pole * lp + (1.0 - pole) * w;
            let hp = w - prev;
            prev = w;
            let mut v = tilt * lp * 3.0 + (1.0 - tilt) * hp * 0.5;
            if let Some((f, a)) = hum {
                v += a * (2.0 * PI * f * i as f64 / fs).sin();
            }
            v * 0.3
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generators_are_deterministic_and_finite() {
        let a = speech_like(&mut ChaCha8Rng::seed_from_u64(3), 16000, 16000);
        let b = speech_like(&mut ChaCha8Rng::seed_from_u64(3), 16000, 16000);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()) && a.iter().any(|&v| v != 0.0));
        let n = colored_noise(&mut ChaCha8Rng::seed_from_u64(3), 16000, 16000);
        assert!(n.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn speech_has_pauses() {
        let x = speech_like(&mut ChaCha8Rng::seed_from_u64(5), 48000, 16000);
        let frames: Vec<f64> = x.chunks(160).map(|c| c.iter().map(|v| v * v).sum::<f64>()).collect();
        let max = frames.iter().cloned().fold(0.0, f64::max);
        assert!(frames.iter().filter(|&&e| e < max * 1e-4).count() > 5);
    }
}
