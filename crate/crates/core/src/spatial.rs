//! Fixed spatial features: inter-channel phase differences, diffuse-field
//! coherence and superdirective beamforming.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{ComplexSpectrogram, FrameParams};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::Tensor;

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Default diagonal loading of the coherence matrix.
pub const DEFAULT_LOADING: f64 = 1e-3;

/// Microphone positions in metres, ordered ch1..chC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayGeometry {
    pub mic_positions: Vec<[f64; 3]>,
    #[serde(default = "default_c")]
    pub speed_of_sound: f64,
}

fn default_c() -> f64 {
    SPEED_OF_SOUND
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        Self::linear(&[0.02, 0.04, 0.06, 0.06, 0.06, 0.04, 0.02]).expect("valid default spacings")
    }
}

impl ArrayGeometry {
    pub fn new(mic_positions: Vec<[f64; 3]>, speed_of_sound: f64) -> Result<Self> {
        let g = ArrayGeometry {
            mic_positions,
            speed_of_sound,
        };
        g.validate()?;
        Ok(g)
    }

    /// Collinear array on the x axis, centred at the origin, with the given
    /// gaps between neighbouring microphones.
    pub fn linear(spacings: &[f64]) -> Result<Self> {
        let mut xs = vec![0.0];
        for &s in spacings {
            xs.push(xs.last().unwrap() + s);
        }
        let centre = xs.last().unwrap() / 2.0;
        Self::new(xs.iter().map(|x| [x - centre, 0.0, 0.0]).collect(), SPEED_OF_SOUND)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mic_positions.is_empty() {
            return invalid("array geometry needs at least one microphone");
        }
        if self.mic_positions.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("microphone positions must be finite");
        }
        if !(self.speed_of_sound > 0.0) {
            return invalid("speed of sound must be positive");
        }
        Ok(())
    }

    pub fn num_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.mic_positions[i], self.mic_positions[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    fn check_subset(&self, subset: &[usize]) -> Result<()> {
        if subset.is_empty() {
            return invalid("microphone subset is empty");
        }
        if let Some(&bad) = subset.iter().find(|&&i| i >= self.num_mics()) {
            return invalid(format!("microphone index {bad} out of range"));
        }
        Ok(())
    }
}

/// The seven look directions `i * pi / 8`, `i = 1..=7`.
pub fn paper_directions() -> Vec<f64> {
    (1..=7).map(|i| i as f64 * PI / 8.0).collect()
}

/// `sin(pi x) / (pi x)` with `sinc(0) = 1`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Phase of `a * conj(b)` per bin, wrapped to `(-pi, pi]`, as `[1, F, T]`.
pub fn ipd(a: &ComplexSpectrogram, b: &ComplexSpectrogram) -> Result<Tensor> {
    if !a.same_shape(b) {
        return shape_err(format!(
            "ipd: {}x{} vs {}x{}",
            a.frames(),
            a.bins(),
            b.frames(),
            b.bins()
        ));
    }
    let (f, t) = (a.bins(), a.frames());
    let mut out = vec![0.0; f * t];
    for ti in 0..t {
        for k in 0..f {
            let z = a.get(ti, k) * b.get(ti, k).conj();
            let mut phi = z.im.atan2(z.re);
            if phi <= -PI {
                phi += 2.0 * PI;
            }
            out[k * t + ti] = phi;
        }
    }
    Tensor::new(&[1, f, t], out)
}

/// Spherically isotropic noise coherence `sinc(2 f d_ij / c)` over `subset`.
pub fn diffuse_coherence(geom: &ArrayGeometry, freq: f64, subset: &[usize]) -> Result<DMatrix<f64>> {
    geom.check_subset(subset)?;
    if !(freq >= 0.0) {
        return invalid("frequency must be non-negative");
    }
    let m = subset.len();
    Ok(DMatrix::from_fn(m, m, |i, j| {
        sinc(2.0 * freq * geom.distance(subset[i], subset[j]) / geom.speed_of_sound)
    }))
}

/// Far-field steering vector for azimuth `theta` (radians from the +x axis
/// in the xy plane) relative to `reference`: `d_i = exp(-j 2 pi f tau_i)`.
pub fn steering_vector(geom: &ArrayGeometry, theta: f64, freq: f64, reference: usize, subset: &[usize]) -> Result<Vec<Complex64>> {
    geom.check_subset(subset)?;
    if reference >= geom.num_mics() {
        return invalid(format!("reference microphone {reference} out of range"));
    }
    let u = [theta.cos(), theta.sin(), 0.0];
    let pr = geom.mic_positions[reference];
    Ok(subset
        .iter()
        .map(|&i| {
            let p = geom.mic_positions[i];
            // a plane wave reaches microphones further along u earlier
            let tau = ((pr[0] - p[0]) * u[0] + (pr[1] - p[1]) * u[1] + (pr[2] - p[2]) * u[2]) / geom.speed_of_sound;
            Complex64::from_polar(1.0, -2.0 * PI * freq * tau)
        })
        .collect())
}

/// Per-bin superdirective weights for one look direction.
#[derive(Clone, Debug)]
pub struct BeamformerWeights {
    pub subset: Vec<usize>,
    pub loading: f64,
    /// `weights[k][i]`: bin `k`, microphone `subset[i]`.
    pub weights: Vec<Vec<Complex64>>,
    pub steering: Vec<Vec<Complex64>>,
}

impl BeamformerWeights {
    /// Largest `|d^H w - 1|` over bins.
    pub fn max_constraint_error(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.steering)
            .map(|(w, d)| {
                let s: Complex64 = d.iter().zip(w).map(|(d, w)| d.conj() * w).sum();
                (s - 1.0).norm()
            })
            .fold(0.0, f64::max)
    }
}

/// `w = (G + dI)^-1 d / (d^H (G + dI)^-1 d)` at every bin, with the first
/// microphone of `subset` as phase reference.
pub fn sdbf_weights(geom: &ArrayGeometry, theta: f64, params: &FrameParams, loading: f64, subset: &[usize]) -> Result<BeamformerWeights> {
    geom.check_subset(subset)?;
    if !(loading > 0.0) {
        return invalid("diagonal loading must be positive");
    }
    let m = subset.len();
    let mut weights = Vec::with_capacity(params.bins());
    let mut steering = Vec::with_capacity(params.bins());
    for k in 0..params.bins() {
        let f = params.bin_frequency(k);
        let mut gamma = diffuse_coherence(geom, f, subset)?;
        for i in 0..m {
            gamma[(i, i)] += loading;
        }
        let chol = gamma
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("coherence matrix not positive definite at bin {k}")))?;
        let d = steering_vector(geom, theta, f, subset[0], subset)?;
        // the matrix is real, so solve real and imaginary parts separately
        let re = chol.solve(&DVector::from_iterator(m, d.iter().map(|z| z.re)));
        let im = chol.solve(&DVector::from_iterator(m, d.iter().map(|z| z.im)));
        let num: Vec<Complex64> = (0..m).map(|i| Complex64::new(re[i], im[i])).collect();
        let den: Complex64 = d.iter().zip(&num).map(|(d, n)| d.conj() * n).sum();
        if !(den.norm() > 0.0) || !den.is_finite() {
            return Err(Error::Numerical(format!("degenerate beamformer normalization at bin {k}")));
        }
        weights.push(num.iter().map(|n| n / den).collect());
        steering.push(d);
    }
    Ok(BeamformerWeights {
        subset: subset.to_vec(),
        loading,
        weights,
        steering,
    })
}

/// `Y(t, f) = sum_i conj(w_i(f)) X_i(t, f)`; `specs` are the spectrograms of
/// the microphones in `w.subset`, in order.
pub fn sdbf_apply(w: &BeamformerWeights, specs: &[&ComplexSpectrogram]) -> Result<ComplexSpectrogram> {
    if specs.len() != w.subset.len() {
        return shape_err(format!(
            "beamformer expects {} channels, got {}",
            w.subset.len(),
            specs.len()
        ));
    }
    let first = specs[0];
    if specs.iter().any(|s| !s.same_shape(first)) || first.bins() != w.weights.len() {
        return shape_err("beamformer input spectrograms have inconsistent shapes");
    }
    let (t, f) = (first.frames(), first.bins());
    let mut out = ComplexSpectrogram::zeros(t, f);
    for (i, s) in specs.iter().enumerate() {
        for ti in 0..t {
            for k in 0..f {
                out.data_mut()[ti * f + k] += w.weights[k][i].conj() * s.get(ti, k);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft;

    #[test]
    fn coherence_hand_values() {
        let g = ArrayGeometry::new(vec![[0.0; 3], [0.05, 0.0, 0.0]], 343.0).unwrap();
        let m0 = diffuse_coherence(&g, 0.0, &[0, 1]).unwrap();
        assert!(m0.iter().all(|&v| v == 1.0));
        let m = diffuse_coherence(&g, 3430.0, &[0, 1]).unwrap();
        assert!(m[(0, 1)].abs() < 1e-15);
        assert_eq!(m[(0, 0)], 1.0);
    }

    #[test]
    fn coherence_is_symmetric_and_bounded() {
        let g = ArrayGeometry::default();
        let all: Vec<usize> = (0..8).collect();
        for f in [0.0, 100.0, 1234.5, 8000.0] {
            let m = diffuse_coherence(&g, f, &all).unwrap();
            for i in 0..8 {
                assert_eq!(m[(i, i)], 1.0);
                for j in 0..8 {
                    assert_eq!(m[(i, j)], m[(j, i)]);
                    assert!(m[(i, j)].abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn steering_vector_cases() {
        let g = ArrayGeometry::new(vec![[0.0; 3], [0.1, 0.0, 0.0]], 343.0).unwrap();
        let d = steering_vector(&g, 0.0, 1715.0, 0, &[0, 1]).unwrap();
        assert_eq!(d[0], Complex64::new(1.0, 0.0));
        assert!((d[1] - Complex64::new(-1.0, 0.0)).norm() < 1e-12);
        assert!((d[1].arg().abs() - PI).abs() < 1e-12);
        let lin = ArrayGeometry::default();
        let all: Vec<usize> = (0..8).collect();
        let b = steering_vector(&lin, PI / 2.0, 3000.0, 0, &all).unwrap();
        assert!(b.iter().all(|z| (z - 1.0).norm() < 1e-12));
    }

    #[test]
    fn single_mic_weights_are_one() {
        let w = sdbf_weights(&ArrayGeometry::default(), PI / 3.0, &FrameParams::paper(), 1e-3, &[0]).unwrap();
        assert!(w.weights.iter().all(|b| (b[0] - 1.0).norm() < 1e-15));
    }

    #[test]
    fn ipd_cases() {
        let p = FrameParams::paper();
        let x: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.05).sin() + 0.3 * (i as f64 * 0.31).cos()).collect();
        let a = stft(&x, &p).unwrap();
        let z = ipd(&a, &a).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let mut neg = a.clone();
        neg.data_mut().iter_mut().for_each(|v| *v = -*v);
        let flip = ipd(&a, &neg).unwrap();
        assert!(flip.data().iter().all(|&v| (v.abs() - PI).abs() < 1e-12));
    }

    #[test]
    fn ipd_of_one_sample_delay_is_linear_phase() {
        // a tone at bin k delayed by one sample: phase advance 2 pi k / N
        let p = FrameParams::paper();
        let k = 20.0;
        let w = 2.0 * PI * k / 512.0;
        let x: Vec<f64> = (0..3200).map(|i| (w * (i as f64 + 1.0)).cos()).collect();
        let y: Vec<f64> = (0..3200).map(|i| (w * i as f64).cos()).collect();
        let (sa, sb) = (stft(&x, &p).unwrap(), stft(&y, &p).unwrap());
        let d = ipd(&sa, &sb).unwrap();
        let t = sa.frames();
        for ti in 0..t {
            assert!((d.data()[20 * t + ti] - w).abs() < 1e-3);
        }
    }

    #[test]
    fn ones_steering_on_identical_channels_passes_through() {
        let p = FrameParams::paper();
        let g = ArrayGeometry::default();
        let w = sdbf_weights(&g, PI / 2.0, &p, 1e-3, &[0, 1]).unwrap();
        let x: Vec<f64> = (0..1600).map(|i| (i as f64 * 0.11).sin()).collect();
        let s = stft(&x, &p).unwrap();
        let y = sdbf_apply(&w, &[&s, &s]).unwrap();
        for (a, b) in y.data().iter().zip(s.data()) {
            assert!((a - b).norm() < 1e-9 * (1.0 + b.norm()));
        }
        let z = ComplexSpectrogram::zeros(s.frames(), s.bins());
        let yz = sdbf_apply(&w, &[&z, &z]).unwrap();
        assert!(yz.data().iter().all(|v| v.norm() == 0.0));
    }
}
