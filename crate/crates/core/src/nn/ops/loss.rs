use std::f64::consts::LN_10;

use crate::error::{invalid, shape_err, Result};
use crate::nn::{Backward, Graph, Tensor, Var};

/// SI-SNR values are limited to `[-SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB]`.
pub const SI_SNR_CLAMP_DB: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiSnrOptions {
    /// Remove the mean of both signals before projecting.
    pub zero_mean: bool,
    pub clamp_db: f64,
}

impl Default for SiSnrOptions {
    fn default() -> Self {
        SiSnrOptions {
            zero_mean: true,
            clamp_db: SI_SNR_CLAMP_DB,
        }
    }
}

/// Intermediate sums for one estimate/reference pair.
struct Terms {
    est: Vec<f64>,
    reference: Vec<f64>,
    dot: f64,
    ref_energy: f64,
    target: f64,
    noise: f64,
}

fn centered(x: &[f64], zero_mean: bool) -> Vec<f64> {
    if !zero_mean {
        return x.to_vec();
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn terms(est: &[f64], reference: &[f64], zero_mean: bool) -> Terms {
    let est = centered(est, zero_mean);
    let reference = centered(reference, zero_mean);
    let dot: f64 = est.iter().zip(&reference).map(|(a, b)| a * b).sum();
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    let target = dot * dot / ref_energy;
    // ||e - t||^2 computed directly, the closed form cancels badly
    let alpha = dot / ref_energy;
    let noise: f64 = est
        .iter()
        .zip(&reference)
        .map(|(e, r)| (e - alpha * r).powi(2))
        .sum();
    Terms {
        est,
        reference,
        dot,
        ref_energy,
        target,
        noise,
    }
}

/// `(value_db, clamped)`.
fn value_db(t: &Terms, clamp: f64) -> (f64, bool) {
    let bound = 10f64.powf(clamp / 10.0);
    if t.target <= 0.0 || t.target * bound <= t.noise {
        return (-clamp, true);
    }
    if t.noise <= 0.0 || t.target >= bound * t.noise {
        return (clamp, true);
    }
    (10.0 * (t.target / t.noise).log10(), false)
}

/// Scale-invariant SNR of plain slices, in dB.
pub fn si_snr_value(est: &[f64], reference: &[f64], opts: SiSnrOptions) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return shape_err(format!(
            "si-snr needs equal non-empty lengths, got {} and {}",
            est.len(),
            reference.len()
        ));
    }
    let t = terms(est, reference, opts.zero_mean);
    if t.ref_energy <= 0.0 {
        return invalid("si-snr reference is all zero");
    }
    Ok(value_db(&t, opts.clamp_db).0)
}

struct SiSnrOp {
    reference: Tensor,
    opts: SiSnrOptions,
}

impl Backward for SiSnrOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let est = inputs[0];
        let (b, n) = (est.shape()[0], est.shape()[1]);
        let mut dx = vec![0.0; b * n];
        let k = 10.0 / LN_10;
        for bi in 0..b {
            let t = terms(
                &est.data()[bi * n..(bi + 1) * n],
                &self.reference.data()[bi * n..(bi + 1) * n],
                self.opts.zero_mean,
            );
            if value_db(&t, self.opts.clamp_db).1 {
                continue;
            }
            let gv = grad.data()[bi];
            let alpha = t.dot / t.ref_energy;
            let row = &mut dx[bi * n..(bi + 1) * n];
            for i in 0..n {
                let d_target = 2.0 * alpha * t.reference[i];
                let d_noise = 2.0 * (t.est[i] - alpha * t.reference[i]);
                row[i] = gv * k * (d_target / t.target - d_noise / t.noise);
            }
            if self.opts.zero_mean {
                // adjoint of mean removal
                let m = row.iter().sum::<f64>() / n as f64;
                row.iter_mut().for_each(|v| *v -= m);
            }
        }
        Ok(vec![Some(Tensor::new(est.shape(), dx)?)])
    }
}

/// Per-item SI-SNR in dB of `est: [B, N]` against fixed references `[B, N]`.
/// Returns a `[B]` value; clamped items have zero gradient.
pub fn si_snr(g: &mut Graph, est: Var, reference: &Tensor, opts: SiSnrOptions) -> Result<Var> {
    let es = g.shape(est).to_vec();
    if es.len() != 2 || reference.shape() != es.as_slice() || es[1] == 0 {
        return shape_err(format!(
            "si-snr: estimate {es:?} and reference {:?} must both be [B, N]",
            reference.shape()
        ));
    }
    let (b, n) = (es[0], es[1]);
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        out.push(si_snr_value(
            &g.value(est).data()[bi * n..(bi + 1) * n],
            &reference.data()[bi * n..(bi + 1) * n],
            opts,
        )?);
    }
    let out = Tensor::new(&[b], out)?;
    Ok(g.apply(
        Box::new(SiSnrOp {
            reference: reference.clone(),
            opts,
        }),
        &[est],
        out,
    ))
}

struct CrossEntropyOp {
    labels: Vec<usize>,
    softmax: Vec<f64>,
}

impl Backward for CrossEntropyOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (b, k, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let scale = grad.item() / (b * t) as f64;
        let mut dx = self.softmax.clone();
        for bi in 0..b {
            for ti in 0..t {
                let y = self.labels[bi * t + ti];
                dx[(bi * k + y) * t + ti] -= 1.0;
            }
        }
        dx.iter_mut().for_each(|v| *v *= scale);
        Ok(vec![Some(Tensor::new(x.shape(), dx)?)])
    }
}

/// Mean frame cross-entropy of `logits: [B, K, T]` against `labels[b * T + t]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || labels.len() != s[0] * s[2] {
        return shape_err(format!(
            "cross entropy: logits {s:?} need {} labels, got {}",
            s.first().copied().unwrap_or(0) * s.get(2).copied().unwrap_or(0),
            labels.len()
        ));
    }
    let (b, k, t) = (s[0], s[1], s[2]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return invalid(format!("label {bad} out of range for {k} classes"));
    }
    let x = g.value(logits).data();
    let mut softmax = vec![0.0; x.len()];
    let mut total = 0.0;
    for bi in 0..b {
        for ti in 0..t {
            let at = |c: usize| (bi * k + c) * t + ti;
            let m = (0..k).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (x[at(c)] - m).exp()).sum();
            for c in 0..k {
                softmax[at(c)] = (x[at(c)] - m).exp() / z;
            }
            total += m + z.ln() - x[at(labels[bi * t + ti])];
        }
    }
    let out = Tensor::scalar(total / (b * t) as f64);
    Ok(g.apply(
        Box::new(CrossEntropyOp {
            labels: labels.to_vec(),
            softmax,
        }),
        &[logits],
        out,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_inputs;
    use crate::nn::ops::mean;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_case_without_mean_removal_is_zero_db() {
        let opts = SiSnrOptions {
            zero_mean: false,
            ..Default::default()
        };
        let v = si_snr_value(&[1.0, 1.0], &[1.0, 0.0], opts).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn scaled_copy_hits_the_clamp() {
        let r: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let e: Vec<f64> = r.iter().map(|v| 3.7 * v).collect();
        assert_eq!(si_snr_value(&e, &r, SiSnrOptions::default()).unwrap(), 60.0);
        let z = vec![0.0; 50];
        assert_eq!(si_snr_value(&z, &r, SiSnrOptions::default()).unwrap(), -60.0);
    }

    #[test]
    fn zero_reference_is_rejected() {
        assert!(si_snr_value(&[1.0, 2.0], &[0.0, 0.0], SiSnrOptions::default()).is_err());
    }

    #[test]
    fn si_snr_and_cross_entropy_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let est = Tensor::new(&[2, 30], (0..60).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let reference = Tensor::new(&[2, 30], (0..60).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let logits = Tensor::new(&[2, 4, 3], (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels = [0, 3, 1, 2, 2, 0];
        for zero_mean in [true, false] {
            let opts = SiSnrOptions {
                zero_mean,
                ..Default::default()
            };
            let r = check_inputs(&[est.clone(), logits.clone()], 1e-6, |g, v| {
                let s = si_snr(g, v[0], &reference, opts)?;
                let s = mean(g, s);
                let c = cross_entropy(g, v[1], &labels)?;
                crate::nn::ops::add(g, s, c)
            })
            .unwrap();
            assert!(r.max_rel_error <= 1e-6, "{r:?}");
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 64, 5]));
        let l = cross_entropy(&mut g, x, &[3, 9, 0, 63, 1]).unwrap();
        assert!((g.value(l).item() - 64f64.ln()).abs() < 1e-12);
    }
}
