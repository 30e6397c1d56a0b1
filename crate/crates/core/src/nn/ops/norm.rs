use crate::error::{shape_err, Result};
use crate::nn::{Backward, Graph, Tensor, Var};

/// Variance floor of batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Variance floor of (cumulative) layer normalization.
pub const NORM_EPS: f64 = 1e-8;

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

/// Channel axis is 1; statistics run over every other axis.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err(format!("normalization needs a channel axis, got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

struct BnTrainOp {
    inv_std: Vec<f64>,
    mean: Vec<f64>,
}

impl Backward for BnTrainOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (b, c, inner) = channel_layout(x.shape())?;
        let m = (b * inner) as f64;
        let (xd, gd) = (x.data(), grad.data());
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * inner;
                for i in base..base + inner {
                    let xh = (xd[i] - self.mean[ch]) * self.inv_std[ch];
                    sum_g[ch] += gd[i];
                    sum_gx[ch] += gd[i] * xh;
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; x.len()];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * inner;
                    let k = gamma.data()[ch] * self.inv_std[ch] / m;
                    for i in base..base + inner {
                        let xh = (xd[i] - self.mean[ch]) * self.inv_std[ch];
                        dx[i] = k * (m * gd[i] - sum_g[ch] - xh * sum_gx[ch]);
                    }
                }
            }
            Tensor::new(x.shape(), dx).expect("same shape")
        });
        Ok(vec![
            dx,
            needs[1].then(|| Tensor::new(&[c], sum_gx.clone()).expect("channels")),
            needs[2].then(|| Tensor::new(&[c], sum_g.clone()).expect("channels")),
        ])
    }
}

/// Training-mode batch normalization with batch statistics. Returns the
/// normalized value and the statistics for the running-average update.
pub fn batch_norm_train(g: &mut Graph, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
    let (b, c, inner) = channel_layout(g.shape(x))?;
    if g.shape(gamma) != [c] || g.shape(beta) != [c] {
        return shape_err(format!("batch norm parameters must have {c} channels"));
    }
    let count = b * inner;
    if count < 2 {
        return shape_err("batch norm in training mode needs at least 2 elements per channel");
    }
    let xd = g.value(x).data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * inner;
            mean[ch] += xd[base..base + inner].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * inner;
            var[ch] += xd[base..base + inner]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (gv, bv) = (g.value(gamma).data(), g.value(beta).data());
    let mut out = vec![0.0; xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * inner;
            for i in base..base + inner {
                out[i] = (xd[i] - mean[ch]) * inv_std[ch] * gv[ch] + bv[ch];
            }
        }
    }
    let out = Tensor::new(g.shape(x), out)?;
    let stats = BatchStats {
        mean: mean.clone(),
        var,
        count,
    };
    let v = g.apply(Box::new(BnTrainOp { inv_std, mean }), &[x, gamma, beta], out);
    Ok((v, stats))
}

struct BnEvalOp {
    inv_std: Vec<f64>,
    mean: Vec<f64>,
}

impl Backward for BnEvalOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (b, c, inner) = channel_layout(x.shape())?;
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dg = vec![0.0; c];
        let mut db = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * inner;
                for i in base..base + inner {
                    let gv = grad.data()[i];
                    if let Some(dx) = dx.as_mut() {
                        dx[i] = gv * gamma.data()[ch] * self.inv_std[ch];
                    }
                    dg[ch] += gv * (x.data()[i] - self.mean[ch]) * self.inv_std[ch];
                    db[ch] += gv;
                }
            }
        }
        Ok(vec![
            dx.map(|d| Tensor::new(x.shape(), d).expect("same shape")),
            needs[1].then(|| Tensor::new(&[c], dg)).transpose()?,
            needs[2].then(|| Tensor::new(&[c], db)).transpose()?,
        ])
    }
}

/// Inference-mode batch normalization with fixed statistics.
pub fn batch_norm_eval(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Var> {
    let (b, c, inner) = channel_layout(g.shape(x))?;
    if g.shape(gamma) != [c] || g.shape(beta) != [c] || running_mean.len() != c || running_var.len() != c {
        return shape_err(format!("batch norm parameters must have {c} channels"));
    }
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let xd = g.value(x).data();
    let (gv, bv) = (g.value(gamma).data(), g.value(beta).data());
    let mut out = vec![0.0; xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * inner;
            for i in base..base + inner {
                out[i] = (xd[i] - running_mean[ch]) * inv_std[ch] * gv[ch] + bv[ch];
            }
        }
    }
    let out = Tensor::new(g.shape(x), out)?;
    Ok(g.apply(
        Box::new(BnEvalOp {
            inv_std,
            mean: running_mean.to_vec(),
        }),
        &[x, gamma, beta],
        out,
    ))
}

struct LayerNormOp {
    cumulative: bool,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for LayerNormOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (xd, gd, gam) = (x.data(), grad.data(), gamma.data());
        let mut dx = vec![0.0; x.len()];
        let mut dgam = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut d_s1 = vec![0.0; t];
        let mut d_s2 = vec![0.0; t];
        for bi in 0..b {
            let at = |ch: usize, ti: usize| (bi * c + ch) * t + ti;
            for ti in 0..t {
                let (mu, r) = (self.mean[bi * t + ti], self.inv_std[bi * t + ti]);
                let n = if self.cumulative { c * (ti + 1) } else { c } as f64;
                let mut sum_gh = 0.0;
                let mut sum_ghx = 0.0;
                for ch in 0..c {
                    let i = at(ch, ti);
                    let gh = gd[i] * gam[ch];
                    let centered = xd[i] - mu;
                    dgam[ch] += gd[i] * centered * r;
                    dbeta[ch] += gd[i];
                    dx[i] = gh * r;
                    sum_gh += gh;
                    sum_ghx += gh * centered;
                }
                let d_var = -0.5 * r * r * r * sum_ghx;
                let d_mean = -r * sum_gh - 2.0 * mu * d_var;
                d_s1[ti] = d_mean / n;
                d_s2[ti] = d_var / n;
            }
            if self.cumulative {
                // frame tau contributes to the statistics of every t >= tau
                for ti in (0..t.saturating_sub(1)).rev() {
                    d_s1[ti] += d_s1[ti + 1];
                    d_s2[ti] += d_s2[ti + 1];
                }
            }
            for ch in 0..c {
                for ti in 0..t {
                    let i = at(ch, ti);
                    dx[i] += d_s1[ti] + 2.0 * xd[i] * d_s2[ti];
                }
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::new(x.shape(), dx)).transpose()?,
            needs[1].then(|| Tensor::new(&[c], dgam)).transpose()?,
            needs[2].then(|| Tensor::new(&[c], dbeta)).transpose()?,
        ])
    }
}

/// Layer normalization over the channel axis of `[B, C, T]` with per-channel
/// gain and bias.
///
/// With `cumulative`, frame `t` is normalized by the statistics of all
/// channels over frames `0..=t` (causal); otherwise each frame uses its own.
pub fn layer_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var, cumulative: bool) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 {
        return shape_err(format!("layer norm expects [B, C, T], got {xs:?}"));
    }
    let (b, c, t) = (xs[0], xs[1], xs[2]);
    if g.shape(gamma) != [c] || g.shape(beta) != [c] {
        return shape_err(format!("layer norm parameters must have {c} channels"));
    }
    let xd = g.value(x).data();
    let (gv, bv) = (g.value(gamma).data(), g.value(beta).data());
    let mut mean = vec![0.0; b * t];
    let mut inv_std = vec![0.0; b * t];
    let mut out = vec![0.0; xd.len()];
    for bi in 0..b {
        let (mut s1, mut s2) = (0.0, 0.0);
        for ti in 0..t {
            if !cumulative {
                s1 = 0.0;
                s2 = 0.0;
            }
            for ch in 0..c {
                let v = xd[(bi * c + ch) * t + ti];
                s1 += v;
                s2 += v * v;
            }
            let n = if cumulative { c * (ti + 1) } else { c } as f64;
            let mu = s1 / n;
            let var = (s2 / n - mu * mu).max(0.0);
            let r = 1.0 / (var + NORM_EPS).sqrt();
            mean[bi * t + ti] = mu;
            inv_std[bi * t + ti] = r;
            for ch in 0..c {
                let i = (bi * c + ch) * t + ti;
                out[i] = (xd[i] - mu) * r * gv[ch] + bv[ch];
            }
        }
    }
    let out = Tensor::new(&xs, out)?;
    Ok(g.apply(
        Box::new(LayerNormOp {
            cumulative,
            mean,
            inv_std,
        }),
        &[x, gamma, beta],
        out,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_inputs;
    use crate::nn::ops::{mul, sum};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn probe(g: &mut Graph, y: Var) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let w = g.constant(rand_tensor(g.shape(y), &mut rng));
        let p = mul(g, y, w)?;
        Ok(sum(g, p))
    }

    fn bn(x: Tensor) -> (Tensor, BatchStats) {
        let c = x.shape()[1];
        let mut g = Graph::new();
        let xv = g.constant(x);
        let ga = g.constant(Tensor::full(&[c], 1.0));
        let be = g.constant(Tensor::zeros(&[c]));
        let (y, s) = batch_norm_train(&mut g, xv, ga, be, BN_EPS).unwrap();
        (g.value(y).clone(), s)
    }

    #[test]
    fn batch_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 3, 4, 5], &mut rng).map(|v| 3.0 * v + 1.5);
        let (y, _) = bn(x);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| y.data()[(b * 3 + ch) * 20..(b * 3 + ch + 1) * 20].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 40.0;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 40.0;
            assert!(m.abs() <= 1e-6);
            assert!((v - 1.0).abs() <= 1e-4, "{v}");
        }
    }

    #[test]
    fn batch_norm_constant_panel_gives_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 4.2));
        let ga = g.constant(Tensor::full(&[1], 2.0));
        let be = g.constant(Tensor::full(&[1], 0.7));
        let (y, _) = batch_norm_train(&mut g, x, ga, be, BN_EPS).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn batch_norm_standardized_input_is_nearly_unchanged() {
        let x = Tensor::new(&[1, 1, 4], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (y, _) = bn(x.clone());
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn norms_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x4 = rand_tensor(&[2, 2, 3, 2], &mut rng);
        let x3 = rand_tensor(&[2, 3, 5], &mut rng);
        let ga = rand_tensor(&[2], &mut rng);
        let gb = rand_tensor(&[3], &mut rng);
        let be = rand_tensor(&[3], &mut rng);
        let r = check_inputs(&[x4, ga.clone(), x3.clone(), gb.clone(), be.clone()], 1e-5, |g, v| {
            let zero = g.constant(Tensor::zeros(&[2]));
            let (y, _) = batch_norm_train(g, v[0], v[1], zero, BN_EPS)?;
            let a = probe(g, y)?;
            let c = layer_norm(g, v[2], v[3], v[4], true)?;
            let d = layer_norm(g, v[2], v[3], v[4], false)?;
            let e = crate::nn::ops::add(g, c, d)?;
            let e = probe(g, e)?;
            let z = batch_norm_eval(g, v[2], v[3], v[4], &[0.1, -0.2, 0.3], &[1.0, 0.5, 2.0], BN_EPS)?;
            let z = probe(g, z)?;
            crate::nn::ops::weighted_sum(g, &[(a, 1.0), (e, 1.0), (z, 1.0)])
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    fn cln(x: Tensor, cumulative: bool) -> Tensor {
        let c = x.shape()[1];
        let mut g = Graph::new();
        let xv = g.constant(x);
        let ga = g.constant(Tensor::full(&[c], 1.0));
        let be = g.constant(Tensor::zeros(&[c]));
        let y = layer_norm(&mut g, xv, ga, be, cumulative).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn cumulative_norm_first_frame_uses_own_statistics() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 10.0, 3.0, -4.0]).unwrap();
        let y = cln(x.clone(), true);
        let f = cln(x, false);
        assert_eq!(y.data()[0], f.data()[0]);
        assert_eq!(y.data()[2], f.data()[2]);
    }

    #[test]
    fn cumulative_norm_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&[1, 4, 10], &mut rng);
        let mut x2 = x.clone();
        for ch in 0..4 {
            x2.data_mut()[ch * 10 + 6] += 5.0;
        }
        let (a, b) = (cln(x, true), cln(x2, true));
        for ch in 0..4 {
            for t in 0..6 {
                assert_eq!(a.data()[ch * 10 + t].to_bits(), b.data()[ch * 10 + t].to_bits());
            }
        }
    }

    #[test]
    fn cumulative_norm_approaches_global_norm_on_stationary_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (c, t) = (16, 1001);
        let x = Tensor::new(
            &[1, c, t],
            (0..c * t).map(|_| 2.0 + rng.sample::<f64, _>(StandardNormal)).collect(),
        )
        .unwrap();
        let y = cln(x.clone(), true);
        let n = (c * t) as f64;
        let m = x.sum() / n;
        let s = (x.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        for ch in 0..c {
            let i = ch * t + 1000;
            assert!((y.data()[i] - (x.data()[i] - m) / s).abs() <= 1e-2);
        }
    }
}
