//! Random acoustic scenes and multi-channel mixture synthesis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{convolve, image_source_rir, RoomClass, RoomSpec};
use crate::dsp::Waveform;
use crate::error::{invalid, Result};
use crate::spatial::ArrayGeometry;

/// Which clean signal the SI-SNR loss compares against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetPolicy {
    /// Clean source through the direct path of the ch1 response.
    #[default]
    DirectPath,
    /// Clean source through the full ch1 response.
    ReverberantClean,
    /// The dry source itself.
    Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Draw weights small : medium : large.
    pub class_ratio: [f64; 3],
    pub height_range: [f64; 2],
    pub absorption_range: [f64; 2],
    pub snr_range: [f64; 2],
    pub max_order: usize,
    pub noise_sources: usize,
    /// Minimum distance of any position to a wall.
    pub wall_margin: f64,
    pub min_source_distance: f64,
    pub target: TargetPolicy,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            class_ratio: [2.0, 3.0, 3.0],
            height_range: [2.5, 4.0],
            absorption_range: [0.2, 0.8],
            snr_range: [-5.0, 20.0],
            max_order: 10,
            noise_sources: 1,
            wall_margin: 0.5,
            min_source_distance: 0.5,
            target: TargetPolicy::DirectPath,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_ratio.iter().any(|&w| w < 0.0) || self.class_ratio.iter().sum::<f64>() <= 0.0 {
            return invalid("room class ratio must be non-negative and not all zero");
        }
        for (name, [lo, hi]) in [
            ("height", self.height_range),
            ("absorption", self.absorption_range),
            ("snr", self.snr_range),
        ] {
            if lo > hi || !lo.is_finite() || !hi.is_finite() {
                return invalid(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if self.absorption_range[0] < 0.0 || self.absorption_range[1] > 1.0 {
            return invalid("absorption range must lie in [0, 1]");
        }
        if self.height_range[0] <= 2.0 * self.wall_margin {
            return invalid("rooms must be taller than twice the wall margin");
        }
        if self.noise_sources == 0 {
            return invalid("at least one noise source is required");
        }
        Ok(())
    }

    /// Room class by weighted draw.
    pub fn draw_class(&self, rng: &mut impl Rng) -> RoomClass {
        let total: f64 = self.class_ratio.iter().sum();
        let mut r = rng.random::<f64>() * total;
        for (c, &w) in RoomClass::ALL.iter().zip(&self.class_ratio) {
            if r < w {
                return *c;
            }
            r -= w;
        }
        RoomClass::Large
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub room: RoomSpec,
    pub array_center: [f64; 3],
    /// Rotation of the array about the vertical axis, radians.
    pub array_rotation: f64,
    pub source: [f64; 3],
    pub noise_positions: Vec<[f64; 3]>,
    pub snr_db: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Absolute microphone positions.
    pub fn mic_positions(&self, geometry: &ArrayGeometry) -> Vec<[f64; 3]> {
        let (s, c) = self.array_rotation.sin_cos();
        geometry
            .mic_positions
            .iter()
            .map(|p| {
                [
                    self.array_center[0] + c * p[0] - s * p[1],
                    self.array_center[1] + s * p[0] + c * p[1],
                    self.array_center[2] + p[2],
                ]
            })
            .collect()
    }

    pub fn validate(&self, geometry: &ArrayGeometry) -> Result<()> {
        self.room.validate()?;
        let inside = |p: [f64; 3]| self.room.contains(p);
        if !inside(self.source) || self.noise_positions.iter().any(|&p| !inside(p)) {
            return invalid("source and noise positions must lie strictly inside the room");
        }
        if self.mic_positions(geometry).into_iter().any(|p| !inside(p)) {
            return invalid("array does not fit inside the room");
        }
        Ok(())
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Draws a random scene.
pub fn draw_scene(rng: &mut impl Rng, cfg: &SceneConfig, geometry: &ArrayGeometry, seed: u64) -> Result<SceneSpec> {
    cfg.validate()?;
    let class = cfg.draw_class(rng);
    let (lo, hi) = class.range();
    let side = |rng: &mut dyn rand::RngCore| {
        let v: f64 = rng.random_range(lo..hi);
        v
    };
    let width = side(rng);
    let length = side(rng);
    let height = uniform(rng, cfg.height_range);
    let absorption = uniform(rng, cfg.absorption_range);
    let room = RoomSpec::new(width, length, height, absorption, class)?;
    let m = cfg.wall_margin;
    let point = |rng: &mut dyn rand::RngCore, zr: [f64; 2]| {
        [
            rng.random_range(m..width - m),
            rng.random_range(m..length - m),
            rng.random_range(zr[0].max(m)..zr[1].min(height - m)),
        ]
    };
    let array_center = point(rng, [1.0, 1.6]);
    let array_rotation = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let far_point = |rng: &mut dyn rand::RngCore| {
        for _ in 0..1000 {
            let p = point(rng, [1.0, 2.0]);
            if dist(p, array_center) >= cfg.min_source_distance {
                return Ok(p);
            }
        }
        invalid("could not place a source away from the array")
    };
    let source = far_point(rng)?;
    let noise_positions = (0..cfg.noise_sources).map(|_| far_point(rng)).collect::<Result<_>>()?;
    let scene = SceneSpec {
        room,
        array_center,
        array_rotation,
        source,
        noise_positions,
        snr_db: uniform(rng, cfg.snr_range),
        seed,
    };
    scene.validate(geometry)?;
    Ok(scene)
}

/// A simulated mixture with its decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub mixture: Waveform,
    pub target: Vec<f64>,
    /// Per-channel reverberant clean speech.
    pub reverberant_clean: Vec<Vec<f64>>,
    /// Per-channel reverberant noise after SNR scaling.
    pub scaled_noise: Vec<Vec<f64>>,
    pub noise_gain: f64,
    pub scene: SceneSpec,
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>()
}

/// Convolves clean speech and noise sources with their responses and mixes
/// them at the scene SNR (measured at channel 1 on the reverberant signals).
pub fn simulate_example(
    clean: &[f64],
    noises: &[Vec<f64>],
    scene: &SceneSpec,
    geometry: &ArrayGeometry,
    cfg: &SceneConfig,
    sample_rate: u32,
) -> Result<TrainingExample> {
    scene.validate(geometry)?;
    if noises.len() != scene.noise_positions.len() {
        return invalid(format!(
            "{} noise signals for {} noise positions",
            noises.len(),
            scene.noise_positions.len()
        ));
    }
    if power(clean) == 0.0 {
        return invalid("clean source is silent");
    }
    let n = clean.len();
    if noises.iter().any(|x| x.len() != n) {
        return invalid("noise signals must match the clean length");
    }
    let c = geometry.speed_of_sound;
    let mics = scene.mic_positions(geometry);
    let mut rev_clean = Vec::with_capacity(mics.len());
    let mut rev_noise = Vec::with_capacity(mics.len());
    for &mic in &mics {
        let h = image_source_rir(&scene.room, scene.source, mic, cfg.max_order, sample_rate, c)?;
        rev_clean.push(convolve(clean, &h));
        let mut acc = vec![0.0; n];
        for (x, &pos) in noises.iter().zip(&scene.noise_positions) {
            let h = image_source_rir(&scene.room, pos, mic, cfg.max_order, sample_rate, c)?;
            for (a, v) in acc.iter_mut().zip(convolve(x, &h)) {
                *a += v;
            }
        }
        rev_noise.push(acc);
    }
    let pn = power(&rev_noise[0]);
    let gain = if pn == 0.0 {
        if noises.iter().any(|x| power(x) > 0.0) {
            return invalid("noise vanished after propagation");
        }
        0.0
    } else {
        (power(&rev_clean[0]) / pn / 10f64.powf(scene.snr_db / 10.0)).sqrt()
    };
    let scaled: Vec<Vec<f64>> = rev_noise.iter().map(|ch| ch.iter().map(|v| v * gain).collect()).collect();
    let mix: Vec<Vec<f64>> = rev_clean
        .iter()
        .zip(&scaled)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    let target = match cfg.target {
        TargetPolicy::ReverberantClean => rev_clean[0].clone(),
        TargetPolicy::Source => clean.to_vec(),
        TargetPolicy::DirectPath => {
            let h = image_source_rir(&scene.room, scene.source, mics[0], 0, sample_rate, c)?;
            convolve(clean, &h)
        }
    };
    Ok(TrainingExample {
        mixture: Waveform::new(sample_rate, mix)?,
        target,
        reverberant_clean: rev_clean,
        scaled_noise: scaled,
        noise_gain: gain,
        scene: scene.clone(),
    })
}
