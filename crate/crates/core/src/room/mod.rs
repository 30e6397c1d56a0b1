//! Shoebox room simulation and training-data synthesis.
//!
//! - [`image_source_rir`]: Allen–Berkley image method with band-limited
//!   fractional delays
//! - [`augment`]: speed and volume perturbation
//! - [`synth`]: built-in speech-like and noise generators
//! - [`scene`]: random scenes and 8-channel mixtures
//! - [`dataset`]: on-disk corpora with a seeded manifest

pub mod augment;
pub mod dataset;
pub mod scene;
pub mod synth;

use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Taps of the windowed-sinc fractional-delay kernel.
pub const SINC_TAPS: usize = 81;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoomClass {
    Small,
    Medium,
    Large,
}

impl RoomClass {
    pub const ALL: [RoomClass; 3] = [RoomClass::Small, RoomClass::Medium, RoomClass::Large];

    /// Floor-dimension range in metres: `[3, 5)`, `[5, 7)`, `[7, 8]`.
    pub fn range(self) -> (f64, f64) {
        match self {
            RoomClass::Small => (3.0, 5.0),
            RoomClass::Medium => (5.0, 7.0),
            RoomClass::Large => (7.0, 8.0),
        }
    }

    pub fn contains(self, v: f64) -> bool {
        let (lo, hi) = self.range();
        match self {
            RoomClass::Large => (lo..=hi).contains(&v),
            _ => (lo..hi).contains(&v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    pub width: f64,
    pub length: f64,
    pub height: f64,
    /// Energy absorption of the walls at x=0, x=W, y=0, y=L, floor, ceiling.
    pub absorption: [f64; 6],
    pub size_class: RoomClass,
}

impl RoomSpec {
    pub fn new(width: f64, length: f64, height: f64, absorption: f64, size_class: RoomClass) -> Result<Self> {
        let r = RoomSpec {
            width,
            length,
            height,
            absorption: [absorption; 6],
            size_class,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.length > 0.0 && self.height > 0.0) {
            return invalid("room dimensions must be positive");
        }
        if !self.size_class.contains(self.width) || !self.size_class.contains(self.length) {
            return invalid(format!(
                "{}x{} m does not fit the {:?} class",
                self.width, self.length, self.size_class
            ));
        }
        if self.absorption.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return invalid("absorption coefficients must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn dims(&self) -> [f64; 3] {
        [self.width, self.length, self.height]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p.iter().zip(self.dims()).all(|(&v, d)| v > 0.0 && v < d)
    }

    /// Pressure reflection coefficients `sqrt(1 - alpha)`.
    pub fn reflection(&self) -> [f64; 6] {
        self.absorption.map(|a| (1.0 - a).sqrt())
    }

    pub fn volume(&self) -> f64 {
        self.width * self.length * self.height
    }

    /// Sabine reverberation time `0.161 V / sum(S_i alpha_i)`.
    pub fn sabine_rt60(&self) -> f64 {
        let [w, l, h] = self.dims();
        let areas = [l * h, l * h, w * h, w * h, w * l, w * l];
        let a: f64 = areas.iter().zip(&self.absorption).map(|(s, a)| s * a).sum();
        0.161 * self.volume() / a
    }
}

/// Normalized sinc, exactly zero at non-zero integers.
fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else if x.fract() == 0.0 {
        0.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Hann window over `|x| <= (SINC_TAPS - 1) / 2 + 1/2`.
fn kernel_window(x: f64) -> f64 {
    let half = SINC_TAPS as f64 / 2.0;
    if x.abs() >= half {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * x / half).cos())
    }
}

/// Adds `gain` delayed by `delay` samples (fractional) into `h`.
pub(crate) fn add_fractional_impulse(h: &mut [f64], delay: f64, gain: f64) {
    let half = (SINC_TAPS / 2) as isize;
    let centre = delay.round() as isize;
    for k in (centre - half)..=(centre + half) {
        if k < 0 || k as usize >= h.len() {
            continue;
        }
        let x = k as f64 - delay;
        h[k as usize] += gain * sinc(x) * kernel_window(x);
    }
}

/// Image-source room impulse response from `src` to `mic`.
///
/// Images with more than `max_order` wall reflections are skipped. Each
/// image contributes `prod(beta) / (4 pi d)` at delay `d / c` seconds.
pub fn image_source_rir(room: &RoomSpec, src: [f64; 3], mic: [f64; 3], max_order: usize, sample_rate: u32, speed_of_sound: f64) -> Result<Vec<f64>> {
    room.validate()?;
    if !room.contains(src) || !room.contains(mic) {
        return invalid("source and microphone must lie strictly inside the room");
    }
    let d0 = src.iter().zip(&mic).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if d0 == 0.0 {
        return invalid("source coincides with the microphone");
    }
    let fs = sample_rate as f64;
    let dims = room.dims();
    let beta = room.reflection();
    let n = max_order as i64;
    // image positions along one axis: (u, q) -> offset and reflection counts
    let axis = |a: usize| {
        let mut v = Vec::new();
        for q in -n..=n {
            for u in 0..2i64 {
                let pos = (1 - 2 * u) as f64 * src[a] + 2.0 * q as f64 * dims[a];
                let lo = (q - u).unsigned_abs() as usize;
                let hi = q.unsigned_abs() as usize;
                if lo + hi <= max_order {
                    v.push((pos - mic[a], lo, hi));
                }
            }
        }
        v
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let mut taps = Vec::new();
    let mut max_delay = 0.0f64;
    for &(dx, x0, x1) in &ax {
        for &(dy, y0, y1) in &ay {
            if x0 + x1 + y0 + y1 > max_order {
                continue;
            }
            for &(dz, z0, z1) in &az {
                if x0 + x1 + y0 + y1 + z0 + z1 > max_order {
                    continue;
                }
                let d = (dx * dx + dy * dy + dz * dz).sqrt();
                let g = beta[0].powi(x0 as i32)
                    * beta[1].powi(x1 as i32)
                    * beta[2].powi(y0 as i32)
                    * beta[3].powi(y1 as i32)
                    * beta[4].powi(z0 as i32)
                    * beta[5].powi(z1 as i32)
                    / (4.0 * std::f64::consts::PI * d);
                let delay = d / speed_of_sound * fs;
                max_delay = max_delay.max(delay);
                taps.push((delay, g));
            }
        }
    }
    let mut h = vec![0.0; max_delay.ceil() as usize + SINC_TAPS / 2 + 1];
    for (delay, g) in taps {
        add_fractional_impulse(&mut h, delay, g);
    }
    Ok(h)
}

/// Linear convolution truncated to `x.len()` samples, via FFT.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let size = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a = fwd.make_input_vec();
    a[..x.len()].copy_from_slice(x);
    let mut b = fwd.make_input_vec();
    b[..h.len()].copy_from_slice(h);
    let mut fa = fwd.make_output_vec();
    let mut fb = fwd.make_output_vec();
    fwd.process(&mut a, &mut fa).expect("fft sizes");
    fwd.process(&mut b, &mut fb).expect("fft sizes");
    for (p, q) in fa.iter_mut().zip(&fb) {
        *p *= q;
    }
    inv.process(&mut fa, &mut a).expect("fft sizes");
    let scale = 1.0 / size as f64;
    a.truncate(x.len());
    a.iter_mut().for_each(|v| *v *= scale);
    a
}

/// Band-limited resampling: output sample `i` reads input time `i * step`.
/// `step > 1` shortens (and low-passes) the signal.
pub fn resample(x: &[f64], step: f64) -> Vec<f64> {
    let out_len = (x.len() as f64 / step).round() as usize;
    let cut = (1.0 / step).min(1.0);
    let half = (SINC_TAPS / 2) as isize;
    let reach = (half as f64 / cut).ceil() as isize;
    (0..out_len)
        .map(|i| {
            let t = i as f64 * step;
            let c = t.round() as isize;
            let mut acc = 0.0;
            for k in (c - reach).max(0)..=(c + reach).min(x.len() as isize - 1) {
                let d = t - k as f64;
                acc += x[k as usize] * cut * sinc(cut * d) * kernel_window(cut * d);
            }
            acc
        })
        .collect()
}
