//! Framing, STFT/iSTFT with weighted overlap-add, and log-power spectra.
//!
//! Framing uses no centering or padding: frame `i` covers samples
//! `[i * hop, i * hop + win_len)`, so a signal of `n >= win_len` samples has
//! `(n - win_len) / hop + 1` frames. The learned time-domain filters of the
//! fusion frontend use the same window and stride, which keeps both feature
//! branches frame-aligned.

mod wav;

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::Tensor;

pub use wav::{read_wav, write_wav, WavFormat};

/// Floor applied to the summed squared window during overlap-add.
pub const WOLA_FLOOR: f64 = 1e-10;

/// Default floor inside the log of [`lps`].
pub const LPS_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
}

/// Analysis/synthesis framing configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameParams {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    #[serde(default)]
    pub window: WindowKind,
}

impl Default for FrameParams {
    fn default() -> Self {
        Self::paper()
    }
}

impl FrameParams {
    /// 16 kHz, 20 ms Hann window, 10 ms hop, 512-point FFT (257 bins).
    pub fn paper() -> Self {
        FrameParams {
            sample_rate: 16_000,
            win_len: 320,
            hop: 160,
            fft_len: 512,
            window: WindowKind::Hann,
        }
    }

    pub fn new(sample_rate: u32, win_len: usize, fft_len: usize) -> Result<Self> {
        let p = FrameParams {
            sample_rate,
            win_len,
            hop: win_len / 2,
            fft_len,
            window: WindowKind::Hann,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.win_len < 2 || self.win_len % 2 != 0 {
            return invalid(format!("window length {} must be even and >= 2", self.win_len));
        }
        if self.hop != self.win_len / 2 {
            return invalid(format!(
                "hop {} must be half the window length {}",
                self.hop, self.win_len
            ));
        }
        if !self.fft_len.is_power_of_two() || self.fft_len < self.win_len {
            return invalid(format!(
                "fft length {} must be a power of two >= window length {}",
                self.fft_len, self.win_len
            ));
        }
        if self.sample_rate == 0 {
            return invalid("sample rate must be positive");
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn num_frames(&self, num_samples: usize) -> Result<usize> {
        if num_samples < self.win_len {
            return Err(Error::TooShort {
                needed: self.win_len,
                got: num_samples,
            });
        }
        Ok((num_samples - self.win_len) / self.hop + 1)
    }

    /// Centre frequency in Hz of bin `k`.
    pub fn bin_frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate as f64 / self.fft_len as f64
    }

    pub fn window(&self) -> Vec<f64> {
        match self.window {
            WindowKind::Hann => hann(self.win_len),
        }
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Multi-channel audio, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    sample_rate: u32,
    channels: Vec<Vec<f64>>,
}

impl Waveform {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = channels.first() else {
            return invalid("waveform needs at least one channel");
        };
        let len = first.len();
        if channels.iter().any(|c| c.len() != len) {
            return shape_err("all channels must have equal length");
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("waveform contains non-finite samples");
        }
        Ok(Waveform {
            sample_rate,
            channels,
        })
    }

    pub fn mono(sample_rate: u32, samples: Vec<f64>) -> Result<Self> {
        Self::new(sample_rate, vec![samples])
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

/// One-sided complex spectrogram, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn new(frames: usize, bins: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != frames * bins {
            return shape_err(format!(
                "{frames} frames x {bins} bins needs {} values, got {}",
                frames * bins,
                data.len()
            ));
        }
        Ok(ComplexSpectrogram { frames, bins, data })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        ComplexSpectrogram {
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); frames * bins],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, k: usize) -> Complex64 {
        self.data[t * self.bins + k]
    }

    pub fn same_shape(&self, other: &ComplexSpectrogram) -> bool {
        self.frames == other.frames && self.bins == other.bins
    }

    /// Real and imaginary planes stacked as `[2F, T]` (bin-major).
    pub fn to_planes(&self) -> Vec<f64> {
        let (f, t) = (self.bins, self.frames);
        let mut out = vec![0.0; 2 * f * t];
        for ti in 0..t {
            for k in 0..f {
                let z = self.data[ti * f + k];
                out[k * t + ti] = z.re;
                out[(f + k) * t + ti] = z.im;
            }
        }
        out
    }

    pub fn from_planes(bins: usize, frames: usize, planes: &[f64]) -> Result<Self> {
        if planes.len() != 2 * bins * frames {
            return shape_err("plane buffer does not match 2 x bins x frames");
        }
        let mut data = Vec::with_capacity(bins * frames);
        for ti in 0..frames {
            for k in 0..bins {
                data.push(Complex64::new(
                    planes[k * frames + ti],
                    planes[(bins + k) * frames + ti],
                ));
            }
        }
        Ok(ComplexSpectrogram { frames, bins, data })
    }
}

/// Planned forward/inverse transforms for one [`FrameParams`].
#[derive(Clone)]
pub struct Stft {
    params: FrameParams,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("params", &self.params).finish()
    }
}

impl Stft {
    pub fn new(params: FrameParams) -> Result<Self> {
        params.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Stft {
            window: params.window(),
            forward: planner.plan_fft_forward(params.fft_len),
            inverse: planner.plan_fft_inverse(params.fft_len),
            params,
        })
    }

    pub fn params(&self) -> &FrameParams {
        &self.params
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Unnormalized real FFT of a zero-padded buffer.
    pub(crate) fn rfft(&self, input: &mut [f64], output: &mut [Complex64]) {
        self.forward
            .process(input, output)
            .expect("buffer sizes match the plan");
    }

    /// `x[n] = sum_k H_k e^{+j2pi kn/N}` over the Hermitian extension of `h`.
    /// Imaginary parts of the DC and Nyquist bins are ignored.
    pub(crate) fn irfft_unscaled(&self, spec: &mut [Complex64], output: &mut [f64]) {
        let n = spec.len();
        spec[0].im = 0.0;
        spec[n - 1].im = 0.0;
        self.inverse
            .process(spec, output)
            .expect("buffer sizes match the plan");
    }

    pub fn forward(&self, x: &[f64]) -> Result<ComplexSpectrogram> {
        let p = &self.params;
        let frames = p.num_frames(x.len())?;
        let bins = p.bins();
        let mut buf = vec![0.0; p.fft_len];
        let mut out = vec![Complex64::new(0.0, 0.0); frames * bins];
        for t in 0..frames {
            let start = t * p.hop;
            buf.iter_mut().for_each(|v| *v = 0.0);
            for n in 0..p.win_len {
                buf[n] = x[start + n] * self.window[n];
            }
            self.rfft(&mut buf, &mut out[t * bins..(t + 1) * bins]);
        }
        ComplexSpectrogram::new(frames, bins, out)
    }

    /// Summed squared synthesis window for `frames` frames over `len` samples.
    pub(crate) fn window_sum(&self, frames: usize, len: usize) -> Vec<f64> {
        let p = &self.params;
        let mut den = vec![0.0; len];
        for t in 0..frames {
            for n in 0..p.win_len {
                let i = t * p.hop + n;
                if i < len {
                    den[i] += self.window[n] * self.window[n];
                }
            }
        }
        den
    }

    /// Natural output length of `frames` overlap-added frames.
    pub fn natural_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.params.hop + self.params.win_len
        }
    }

    /// Weighted overlap-add inverse. The output is zero-padded or trimmed to
    /// `len` when given.
    pub fn inverse(&self, spec: &ComplexSpectrogram, len: Option<usize>) -> Result<Vec<f64>> {
        let p = &self.params;
        if spec.bins() != p.bins() {
            return shape_err(format!(
                "spectrogram has {} bins but fft length {} implies {}",
                spec.bins(),
                p.fft_len,
                p.bins()
            ));
        }
        let frames = spec.frames();
        let out_len = len.unwrap_or_else(|| self.natural_len(frames));
        let mut out = vec![0.0; out_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); p.bins()];
        let mut time = vec![0.0; p.fft_len];
        let scale = 1.0 / p.fft_len as f64;
        for t in 0..frames {
            buf.copy_from_slice(spec.frame(t));
            self.irfft_unscaled(&mut buf, &mut time);
            for n in 0..p.win_len {
                let i = t * p.hop + n;
                if i < out_len {
                    out[i] += time[n] * scale * self.window[n];
                }
            }
        }
        let den = self.window_sum(frames, out_len);
        for (o, d) in out.iter_mut().zip(&den) {
            *o /= d.max(WOLA_FLOOR);
        }
        Ok(out)
    }
}

/// Single-channel STFT.
pub fn stft(x: &[f64], params: &FrameParams) -> Result<ComplexSpectrogram> {
    Stft::new(*params)?.forward(x)
}

/// Inverse STFT; `len` trims or pads the result to the original sample count.
pub fn istft(spec: &ComplexSpectrogram, params: &FrameParams, len: Option<usize>) -> Result<Vec<f64>> {
    Stft::new(*params)?.inverse(spec, len)
}

/// Log-power spectrum `ln(max(|X|^2, floor))` as a `[1, F, T]` feature map.
pub fn lps(spec: &ComplexSpectrogram, floor: f64) -> Result<Tensor> {
    if floor <= 0.0 || !floor.is_finite() {
        return invalid(format!("log floor must be positive, got {floor}"));
    }
    let (f, t) = (spec.bins(), spec.frames());
    let mut out = vec![0.0; f * t];
    for ti in 0..t {
        for k in 0..f {
            out[k * t + ti] = spec.get(ti, k).norm_sqr().max(floor).ln();
        }
    }
    Tensor::new(&[1, f, t], out)
}

/// Writes a `[.., F, T]` map as CSV with one row per frame.
pub fn write_frame_major_csv(path: &Path, map: &Tensor) -> Result<()> {
    use std::io::Write;
    let shape = map.shape();
    if shape.len() < 2 {
        return shape_err("feature map needs at least two dimensions");
    }
    let t = shape[shape.len() - 1];
    let f = shape[shape.len() - 2];
    let data = &map.data()[..f * t];
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ti in 0..t {
        let row: Vec<String> = (0..f).map(|k| format!("{}", data[k * t + ti])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_wave_gives_zero_spectrum_with_expected_shape() {
        let s = stft(&vec![0.0; 1600], &FrameParams::paper()).unwrap();
        assert_eq!((s.frames(), s.bins()), (9, 257));
        assert!(s.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn short_signal_is_rejected() {
        let err = stft(&[0.0; 100], &FrameParams::paper()).unwrap_err();
        assert!(matches!(err, Error::TooShort { needed: 320, got: 100 }));
    }

    #[test]
    fn frame_count_formula_holds() {
        let p = FrameParams::paper();
        for n in [320, 321, 479, 480, 481, 16000, 16001] {
            let s = stft(&vec![0.1; n], &p).unwrap();
            assert_eq!(s.frames(), (n - 320) / 160 + 1, "n = {n}");
        }
    }

    #[test]
    fn cosine_matches_naive_windowed_dft() {
        let p = FrameParams::paper();
        let k0 = 5.0;
        let x: Vec<f64> = (0..1600)
            .map(|n| (2.0 * PI * k0 * n as f64 / 512.0).cos())
            .collect();
        let s = stft(&x, &p).unwrap();
        let w = hann(320);
        for t in [0, 3, 8] {
            for k in 0..257 {
                let mut acc = Complex64::new(0.0, 0.0);
                for n in 0..320 {
                    let ang = -2.0 * PI * (k * n) as f64 / 512.0;
                    acc += Complex64::from_polar(x[t * 160 + n] * w[n], ang);
                }
                let got = s.get(t, k);
                let scale = acc.norm().max(1.0);
                assert!((got - acc).norm() / scale < 1e-10, "t={t} k={k}");
            }
        }
    }

    #[test]
    fn round_trip_interior_is_exact() {
        let p = FrameParams::paper();
        let x = random_signal(16000, 3);
        let y = istft(&stft(&x, &p).unwrap(), &p, Some(x.len())).unwrap();
        assert_eq!(y.len(), x.len());
        let err = (320..16000 - 320)
            .map(|i| (x[i] - y[i]).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn zero_spectrogram_inverts_to_zero() {
        let p = FrameParams::paper();
        let y = istft(&ComplexSpectrogram::zeros(10, 257), &p, None).unwrap();
        assert_eq!(y.len(), 9 * 160 + 320);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_windowed_impulse_reconstructs() {
        let p = FrameParams::paper();
        let n0 = 100;
        let mut x = vec![0.0; 320];
        x[n0] = 1.0;
        let s = stft(&x, &p).unwrap();
        assert_eq!(s.frames(), 1);
        let y = istft(&s, &p, None).unwrap();
        // frame = w * x, synthesis multiplies by w again and divides by w^2
        for (i, v) in y.iter().enumerate() {
            let want = if i == n0 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12, "i={i} v={v}");
        }
    }

    #[test]
    fn istft_rejects_wrong_bin_count() {
        let p = FrameParams::paper();
        assert!(istft(&ComplexSpectrogram::zeros(3, 100), &p, None).is_err());
    }

    #[test]
    fn lps_unit_magnitude_is_zero_and_floor_engages() {
        let ones = ComplexSpectrogram::new(4, 3, vec![Complex64::from_polar(1.0, 0.7); 12]).unwrap();
        assert!(lps(&ones, LPS_FLOOR).unwrap().data().iter().all(|v| v.abs() < 1e-15));
        let zeros = ComplexSpectrogram::zeros(4, 3);
        let l = lps(&zeros, 1e-12).unwrap();
        assert!(l.data().iter().all(|&v| (v - (1e-12f64).ln()).abs() < 1e-12));
        assert!((l.data()[0] + 27.631).abs() < 1e-3);
        assert!(lps(&zeros, 0.0).is_err());
    }

    #[test]
    fn lps_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<Complex64> = (0..5 * 7)
            .map(|_| Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        let s = ComplexSpectrogram::new(5, 7, data).unwrap();
        let l = lps(&s, 1e-12).unwrap();
        for t in 0..5 {
            for k in 0..7 {
                let z = s.get(t, k);
                let want = (z.re * z.re + z.im * z.im).max(1e-12).ln();
                assert!((l.data()[k * 5 + t] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn planes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<Complex64> = (0..6 * 4)
            .map(|_| Complex64::new(rng.random(), rng.random()))
            .collect();
        let s = ComplexSpectrogram::new(6, 4, data).unwrap();
        let back = ComplexSpectrogram::from_planes(4, 6, &s.to_planes()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn frame_params_validation() {
        assert!(FrameParams::new(16000, 320, 512).is_ok());
        assert!(FrameParams::new(16000, 320, 256).is_err());
        assert!(FrameParams::new(16000, 320, 500).is_err());
        assert!(FrameParams::new(16000, 321, 512).is_err());
    }
}
