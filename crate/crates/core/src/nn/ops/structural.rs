use crate::error::{shape_err, Result};
use crate::nn::{Backward, Graph, Tensor, Var};

/// `(outer, dim, inner)` view of a shape around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

struct ReshapeOp;

impl Backward for ReshapeOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.clone().reshape(inputs[0].shape())?)])
    }
}

pub fn reshape(g: &mut Graph, x: Var, shape: &[usize]) -> Result<Var> {
    let out = g.value(x).clone().reshape(shape)?;
    Ok(g.apply(Box::new(ReshapeOp), &[x], out))
}

struct ConcatOp {
    axis: usize,
}

impl Backward for ConcatOp {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (outer, total, inner) = split(out.shape(), self.axis);
        let mut offset = 0;
        let mut res = Vec::with_capacity(inputs.len());
        for (x, &need) in inputs.iter().zip(needs) {
            let d = x.shape()[self.axis];
            if need {
                let mut gx = Vec::with_capacity(x.len());
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    gx.extend_from_slice(&grad.data()[base..base + d * inner]);
                }
                res.push(Some(Tensor::new(x.shape(), gx)?));
            } else {
                res.push(None);
            }
            offset += d;
        }
        Ok(res)
    }
}

/// Concatenation along `axis`; all other dimensions must agree.
pub fn concat(g: &mut Graph, xs: &[Var], axis: usize) -> Result<Var> {
    let Some(&first) = xs.first() else {
        return shape_err("concat of nothing");
    };
    let mut shape = g.shape(first).to_vec();
    if axis >= shape.len() {
        return shape_err(format!("concat axis {axis} out of range for {shape:?}"));
    }
    let mut total = 0;
    for &x in xs {
        let s = g.shape(x);
        let compatible = s.len() == shape.len()
            && s.iter().zip(&shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return shape_err(format!("concat: {s:?} incompatible with {shape:?} on axis {axis}"));
        }
        total += s[axis];
    }
    shape[axis] = total;
    let (outer, _, inner) = split(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for &x in xs {
            let d = g.shape(x)[axis];
            let base = o * d * inner;
            data.extend_from_slice(&g.value(x).data()[base..base + d * inner]);
        }
    }
    let out = Tensor::new(&shape, data)?;
    Ok(g.apply(Box::new(ConcatOp { axis }), xs, out))
}

struct GatherOp {
    axis: usize,
    indices: Vec<usize>,
}

impl Backward for GatherOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (outer, d, inner) = split(x.shape(), self.axis);
        let k = self.indices.len();
        let mut gx = Tensor::zeros(x.shape());
        for o in 0..outer {
            for (j, &i) in self.indices.iter().enumerate() {
                let src = &grad.data()[(o * k + j) * inner..(o * k + j + 1) * inner];
                let dst = &mut gx.data_mut()[(o * d + i) * inner..(o * d + i + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Selects `indices` (repeats allowed) along `axis`.
pub fn gather(g: &mut Graph, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if axis >= xs.len() {
        return shape_err(format!("gather axis {axis} out of range for {xs:?}"));
    }
    let (outer, d, inner) = split(&xs, axis);
    if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
        return shape_err(format!("gather index {bad} out of range {d}"));
    }
    let mut shape = xs.clone();
    shape[axis] = indices.len();
    let mut data = Vec::with_capacity(outer * indices.len() * inner);
    let xv = g.value(x).data();
    for o in 0..outer {
        for &i in indices {
            data.extend_from_slice(&xv[(o * d + i) * inner..(o * d + i + 1) * inner]);
        }
    }
    let out = Tensor::new(&shape, data)?;
    Ok(g.apply(
        Box::new(GatherOp {
            axis,
            indices: indices.to_vec(),
        }),
        &[x],
        out,
    ))
}

fn swap_data(data: &[f64], outer: usize, a: usize, b: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..a {
            for j in 0..b {
                let src = ((o * a + i) * b + j) * inner;
                let dst = ((o * b + j) * a + i) * inner;
                out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
            }
        }
    }
    out
}

struct SwapOp {
    outer: usize,
    a: usize,
    b: usize,
    inner: usize,
}

impl Backward for SwapOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let d = swap_data(grad.data(), self.outer, self.b, self.a, self.inner);
        Ok(vec![Some(Tensor::new(inputs[0].shape(), d)?)])
    }
}

/// Exchanges dimensions `axis` and `axis + 1`.
pub fn swap_axes(g: &mut Graph, x: Var, axis: usize) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if axis + 1 >= xs.len() {
        return shape_err(format!("cannot swap axis {axis} of {xs:?}"));
    }
    let outer = xs[..axis].iter().product();
    let inner = xs[axis + 2..].iter().product();
    let (a, b) = (xs[axis], xs[axis + 1]);
    let d = swap_data(g.value(x).data(), outer, a, b, inner);
    let mut shape = xs;
    shape.swap(axis, axis + 1);
    let out = Tensor::new(&shape, d)?;
    Ok(g.apply(Box::new(SwapOp { outer, a, b, inner }), &[x], out))
}

struct SpliceOp {
    offsets: Vec<isize>,
}

fn clamp_frame(t: usize, off: isize, frames: usize) -> usize {
    (t as isize + off).clamp(0, frames as isize - 1) as usize
}

impl Backward for SpliceOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (b, d, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = self.offsets.len();
        let mut gx = Tensor::zeros(x.shape());
        let gd = gx.data_mut();
        for bi in 0..b {
            for (j, &off) in self.offsets.iter().enumerate() {
                for c in 0..d {
                    let grow = &grad.data()[((bi * k + j) * d + c) * t..][..t];
                    let base = (bi * d + c) * t;
                    for (ti, &gv) in grow.iter().enumerate() {
                        gd[base + clamp_frame(ti, off, t)] += gv;
                    }
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Frame splicing for `[B, D, T]`: output `[B, D * offsets.len(), T]` where
/// block `j` holds the input shifted by `offsets[j]` frames. Frames outside
/// `[0, T)` replicate the nearest edge frame.
pub fn splice(g: &mut Graph, x: Var, offsets: &[isize]) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 || xs[2] == 0 || offsets.is_empty() {
        return shape_err(format!("splice expects non-empty [B, D, T], got {xs:?}"));
    }
    let (b, d, t) = (xs[0], xs[1], xs[2]);
    let k = offsets.len();
    let xv = g.value(x).data();
    let mut data = Vec::with_capacity(b * k * d * t);
    for bi in 0..b {
        for &off in offsets {
            for c in 0..d {
                let base = (bi * d + c) * t;
                data.extend((0..t).map(|ti| xv[base + clamp_frame(ti, off, t)]));
            }
        }
    }
    let out = Tensor::new(&[b, k * d, t], data)?;
    Ok(g.apply(
        Box::new(SpliceOp {
            offsets: offsets.to_vec(),
        }),
        &[x],
        out,
    ))
}

struct IcdKernelOp;

impl Backward for IcdKernelOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (k, w1, w2) = (inputs[0], inputs[1], inputs[2]);
        let (n, l) = (k.shape()[0], k.shape()[1]);
        let gd = grad.data();
        let mut dk = needs[0].then(|| Tensor::zeros(k.shape()));
        let mut dw1 = needs[1].then(|| Tensor::zeros(&[l]));
        let mut dw2 = needs[2].then(|| Tensor::zeros(&[l]));
        for f in 0..n {
            for i in 0..l {
                let g1 = gd[(f * 2) * l + i];
                let g2 = gd[(f * 2 + 1) * l + i];
                let kv = k.data()[f * l + i];
                if let Some(dk) = dk.as_mut() {
                    dk.data_mut()[f * l + i] = g1 * w1.data()[i] - g2 * w2.data()[i];
                }
                if let Some(d) = dw1.as_mut() {
                    d.data_mut()[i] += g1 * kv;
                }
                if let Some(d) = dw2.as_mut() {
                    d.data_mut()[i] -= g2 * kv;
                }
            }
        }
        Ok(vec![dk, dw1, dw2])
    }
}

/// Builds the two-row difference kernel `[N, 1, 2, L]` with rows
/// `w1 * k[n]` and `-w2 * k[n]` from a shared filter bank `k: [N, L]`.
pub fn icd_kernel(g: &mut Graph, k: Var, w1: Var, w2: Var) -> Result<Var> {
    let ks = g.shape(k).to_vec();
    if ks.len() != 2 || g.shape(w1) != [ks[1]] || g.shape(w2) != [ks[1]] {
        return shape_err(format!(
            "icd kernel: filters {ks:?} with weights {:?}/{:?}",
            g.shape(w1),
            g.shape(w2)
        ));
    }
    let (n, l) = (ks[0], ks[1]);
    let (kv, a, b) = (g.value(k).data(), g.value(w1).data(), g.value(w2).data());
    let mut data = Vec::with_capacity(n * 2 * l);
    for f in 0..n {
        data.extend((0..l).map(|i| a[i] * kv[f * l + i]));
        data.extend((0..l).map(|i| -b[i] * kv[f * l + i]));
    }
    let out = Tensor::new(&[n, 1, 2, l], data)?;
    Ok(g.apply(Box::new(IcdKernelOp), &[k, w1, w2], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_inputs;
    use crate::nn::ops::{mul, sum};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Weighted sum so every output element has a distinct sensitivity.
    fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(rand_tensor(g.shape(y), &mut rng));
        let p = mul(g, y, w)?;
        Ok(sum(g, p))
    }

    #[test]
    fn concat_and_gather_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 2, 4], &mut rng);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = concat(&mut g, &[av, bv], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5, 4]);
        let back = gather(&mut g, c, 1, &[3, 4]).unwrap();
        assert_eq!(g.value(back), &b);
    }

    #[test]
    fn swap_axes_transposes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap());
        let y = swap_axes(&mut g, x, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 2]);
        assert_eq!(g.value(y).data(), &[0., 3., 1., 4., 2., 5.]);
    }

    #[test]
    fn splice_replicates_edges() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 3], vec![1., 2., 3.]).unwrap());
        let y = splice(&mut g, x, &[-1, 0, 1]).unwrap();
        assert_eq!(g.value(y).data(), &[1., 1., 2., 1., 2., 3., 2., 3., 3.]);
    }

    #[test]
    fn structural_ops_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&[2, 3, 5], &mut rng);
        let b = rand_tensor(&[2, 1, 5], &mut rng);
        let r = check_inputs(&[a, b], 1e-5, |g, v| {
            let c = concat(g, &[v[0], v[1]], 1)?;
            let s = swap_axes(g, c, 1)?;
            let r = reshape(g, s, &[2, 5, 4])?;
            let q = gather(g, r, 2, &[3, 0, 0, 2])?;
            let sp = splice(g, q, &[-2, 0, 1])?;
            probe(g, sp, 9)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-7, "{r:?}");
    }

    #[test]
    fn icd_kernel_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = rand_tensor(&[3, 4], &mut rng);
        let w1 = rand_tensor(&[4], &mut rng);
        let w2 = rand_tensor(&[4], &mut rng);
        let r = check_inputs(&[k, w1, w2], 1e-5, |g, v| {
            let y = icd_kernel(g, v[0], v[1], v[2])?;
            probe(g, y, 1)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-7, "{r:?}");
    }
}
