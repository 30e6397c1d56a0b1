//! Spectral operations on `[B, 2F, T]` planes: rows `0..F` hold real parts,
//! rows `F..2F` imaginary parts.

use std::sync::Arc;

use realfft::num_complex::Complex64;

use crate::dsp::{ComplexSpectrogram, Stft, WOLA_FLOOR};
use crate::error::{shape_err, Result};
use crate::nn::{Backward, Graph, Tensor, Var};

struct StftOp {
    stft: Arc<Stft>,
    frames: usize,
}

impl Backward for StftOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (b, n) = (x.shape()[0], x.shape()[1]);
        let p = *self.stft.params();
        let (f, t) = (p.bins(), self.frames);
        let win = self.stft.window();
        let mut dx = vec![0.0; b * n];
        let mut spec = vec![Complex64::new(0.0, 0.0); f];
        let mut time = vec![0.0; p.fft_len];
        for bi in 0..b {
            let gd = &grad.data()[bi * 2 * f * t..(bi + 1) * 2 * f * t];
            for ti in 0..t {
                for k in 0..f {
                    spec[k] = Complex64::new(gd[k * t + ti], gd[(f + k) * t + ti]);
                }
                // The unscaled inverse doubles interior bins (Hermitian
                // extension), so DC and Nyquist are pre-doubled to match.
                spec[0] *= 2.0;
                spec[f - 1] *= 2.0;
                self.stft.irfft_unscaled(&mut spec, &mut time);
                let base = bi * n + ti * p.hop;
                for j in 0..p.win_len {
                    dx[base + j] += 0.5 * time[j] * win[j];
                }
            }
        }
        Ok(vec![Some(Tensor::new(x.shape(), dx)?)])
    }
}

/// Batched STFT: `x: [B, N]` → `[B, 2F, T]`.
pub fn stft(g: &mut Graph, x: Var, stft: &Arc<Stft>) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 2 {
        return shape_err(format!("stft expects [B, N], got {xs:?}"));
    }
    let (b, n) = (xs[0], xs[1]);
    let p = stft.params();
    let (f, t) = (p.bins(), p.num_frames(n)?);
    let mut out = Vec::with_capacity(b * 2 * f * t);
    for bi in 0..b {
        let spec = stft.forward(&g.value(x).data()[bi * n..(bi + 1) * n])?;
        out.extend(spec.to_planes());
    }
    let out = Tensor::new(&[b, 2 * f, t], out)?;
    Ok(g.apply(
        Box::new(StftOp {
            stft: stft.clone(),
            frames: t,
        }),
        &[x],
        out,
    ))
}

struct IstftOp {
    stft: Arc<Stft>,
    len: usize,
}

impl Backward for IstftOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let s = inputs[0];
        let (b, t) = (s.shape()[0], s.shape()[2]);
        let p = *self.stft.params();
        let f = p.bins();
        let win = self.stft.window();
        let den = self.stft.window_sum(t, self.len);
        let scale = 1.0 / p.fft_len as f64;
        let mut ds = vec![0.0; b * 2 * f * t];
        let mut buf = vec![0.0; p.fft_len];
        let mut spec = vec![Complex64::new(0.0, 0.0); f];
        for bi in 0..b {
            let gy = &grad.data()[bi * self.len..(bi + 1) * self.len];
            let out = &mut ds[bi * 2 * f * t..(bi + 1) * 2 * f * t];
            for ti in 0..t {
                buf.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..p.win_len {
                    let i = ti * p.hop + j;
                    if i < self.len {
                        buf[j] = gy[i] / den[i].max(WOLA_FLOOR) * win[j];
                    }
                }
                self.stft.rfft(&mut buf, &mut spec);
                for k in 0..f {
                    let c = if k == 0 || k == f - 1 { 1.0 } else { 2.0 };
                    out[k * t + ti] = c * scale * spec[k].re;
                    out[(f + k) * t + ti] = if k == 0 || k == f - 1 {
                        0.0
                    } else {
                        c * scale * spec[k].im
                    };
                }
            }
        }
        Ok(vec![Some(Tensor::new(s.shape(), ds)?)])
    }
}

/// Batched weighted overlap-add inverse: `[B, 2F, T]` → `[B, len]`.
pub fn istft(g: &mut Graph, spec: Var, stft: &Arc<Stft>, len: usize) -> Result<Var> {
    let ss = g.shape(spec).to_vec();
    let f = stft.params().bins();
    if ss.len() != 3 || ss[1] != 2 * f {
        return shape_err(format!("istft expects [B, {}, T], got {ss:?}", 2 * f));
    }
    let (b, t) = (ss[0], ss[2]);
    let mut out = Vec::with_capacity(b * len);
    for bi in 0..b {
        let planes = &g.value(spec).data()[bi * 2 * f * t..(bi + 1) * 2 * f * t];
        let cs = ComplexSpectrogram::from_planes(f, t, planes)?;
        out.extend(stft.inverse(&cs, Some(len))?);
    }
    let out = Tensor::new(&[b, len], out)?;
    Ok(g.apply(
        Box::new(IstftOp {
            stft: stft.clone(),
            len,
        }),
        &[spec],
        out,
    ))
}

struct LpsOp {
    floor: f64,
}

impl Backward for LpsOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let s = inputs[0];
        let (b, f2, t) = (s.shape()[0], s.shape()[1], s.shape()[2]);
        let f = f2 / 2;
        let mut ds = vec![0.0; s.len()];
        for bi in 0..b {
            for k in 0..f {
                for ti in 0..t {
                    let ir = (bi * f2 + k) * t + ti;
                    let ii = (bi * f2 + f + k) * t + ti;
                    let (re, im) = (s.data()[ir], s.data()[ii]);
                    let pw = re * re + im * im;
                    if pw > self.floor {
                        let gv = grad.data()[(bi * f + k) * t + ti];
                        ds[ir] = gv * 2.0 * re / pw;
                        ds[ii] = gv * 2.0 * im / pw;
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(s.shape(), ds)?)])
    }
}

/// Log-power spectrum `ln(max(re^2 + im^2, floor))`: `[B, 2F, T]` → `[B, F, T]`.
pub fn lps(g: &mut Graph, spec: Var, floor: f64) -> Result<Var> {
    let ss = g.shape(spec).to_vec();
    if ss.len() != 3 || ss[1] % 2 != 0 {
        return shape_err(format!("lps expects [B, 2F, T], got {ss:?}"));
    }
    let (b, f, t) = (ss[0], ss[1] / 2, ss[2]);
    let sd = g.value(spec).data();
    let mut out = Vec::with_capacity(b * f * t);
    for bi in 0..b {
        for k in 0..f {
            for ti in 0..t {
                let re = sd[(bi * 2 * f + k) * t + ti];
                let im = sd[(bi * 2 * f + f + k) * t + ti];
                out.push((re * re + im * im).max(floor).ln());
            }
        }
    }
    let out = Tensor::new(&[b, f, t], out)?;
    Ok(g.apply(Box::new(LpsOp { floor }), &[spec], out))
}

struct MaskOp;

impl Backward for MaskOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (m, s) = (inputs[0], inputs[1]);
        let (b, f2, t) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        let f = f2 / 2;
        let mut dm = needs[0].then(|| vec![0.0; m.len()]);
        let mut ds = needs[1].then(|| vec![0.0; s.len()]);
        for bi in 0..b {
            for k in 0..f {
                for ti in 0..t {
                    let ir = (bi * f2 + k) * t + ti;
                    let ii = (bi * f2 + f + k) * t + ti;
                    let (gr, gi) = (grad.data()[ir], grad.data()[ii]);
                    let (mr, mi) = (m.data()[ir], m.data()[ii]);
                    let (sr, si) = (s.data()[ir], s.data()[ii]);
                    // y = m * s; the adjoint multiplies by the conjugate
                    if let Some(dm) = dm.as_mut() {
                        dm[ir] = gr * sr + gi * si;
                        dm[ii] = -gr * si + gi * sr;
                    }
                    if let Some(ds) = ds.as_mut() {
                        ds[ir] = gr * mr + gi * mi;
                        ds[ii] = -gr * mi + gi * mr;
                    }
                }
            }
        }
        Ok(vec![
            dm.map(|d| Tensor::new(m.shape(), d)).transpose()?,
            ds.map(|d| Tensor::new(s.shape(), d)).transpose()?,
        ])
    }
}

/// Elementwise complex product of two `[B, 2F, T]` plane stacks.
pub fn complex_mask(g: &mut Graph, mask: Var, spec: Var) -> Result<Var> {
    let ms = g.shape(mask).to_vec();
    if ms.len() != 3 || ms[1] % 2 != 0 || g.shape(spec) != ms.as_slice() {
        return shape_err(format!(
            "complex mask {ms:?} does not match spectrum {:?}",
            g.shape(spec)
        ));
    }
    let (b, f2, t) = (ms[0], ms[1], ms[2]);
    let f = f2 / 2;
    let (m, s) = (g.value(mask).data(), g.value(spec).data());
    let mut out = vec![0.0; m.len()];
    for bi in 0..b {
        for k in 0..f {
            for ti in 0..t {
                let ir = (bi * f2 + k) * t + ti;
                let ii = (bi * f2 + f + k) * t + ti;
                out[ir] = m[ir] * s[ir] - m[ii] * s[ii];
                out[ii] = m[ir] * s[ii] + m[ii] * s[ir];
            }
        }
    }
    let out = Tensor::new(&ms, out)?;
    Ok(g.apply(Box::new(MaskOp), &[mask, spec], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FrameParams;
    use crate::nn::gradcheck::check_inputs;
    use crate::nn::ops::{mul, sum};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn probe(g: &mut Graph, y: Var) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = g.constant(rand_tensor(g.shape(y), &mut rng));
        let p = mul(g, y, w)?;
        Ok(sum(g, p))
    }

    fn small() -> Arc<Stft> {
        Arc::new(Stft::new(FrameParams::new(16_000, 16, 16).unwrap()).unwrap())
    }

    #[test]
    fn stft_istft_chain_passes_gradcheck() {
        let st = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 52], &mut rng);
        let r = check_inputs(&[x], 1e-5, |g, v| {
            let s = stft(g, v[0], &st)?;
            let a = probe(g, s)?;
            let y = istft(g, s, &st, 52)?;
            let b = probe(g, y)?;
            crate::nn::ops::add(g, a, b)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn istft_passes_gradcheck_on_free_spectra() {
        let st = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = rand_tensor(&[1, 18, 4], &mut rng);
        let r = check_inputs(&[s], 1e-5, |g, v| {
            let y = istft(g, v[0], &st, 40)?;
            probe(g, y)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn mask_and_lps_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = rand_tensor(&[2, 6, 3], &mut rng);
        let s = rand_tensor(&[2, 6, 3], &mut rng);
        let r = check_inputs(&[m, s], 1e-6, |g, v| {
            let y = complex_mask(g, v[0], v[1])?;
            let l = lps(g, y, 1e-12)?;
            let a = probe(g, l)?;
            let b = probe(g, y)?;
            crate::nn::ops::add(g, a, b)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn unit_imaginary_mask_rotates_by_ninety_degrees() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(&[1, 2, 1], vec![0.0, 1.0]).unwrap());
        let s = g.constant(Tensor::new(&[1, 2, 1], vec![3.0, 4.0]).unwrap());
        let y = complex_mask(&mut g, m, s).unwrap();
        assert_eq!(g.value(y).data(), &[-4.0, 3.0]);
    }
}
