//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Precision, Tensor, Var};
use crate::error::{invalid, Result};

/// Denominator floor of the relative error, so entries whose true gradient
/// is (numerically) zero are judged on an absolute scale instead.
pub const REL_FLOOR: f64 = 1e-4;

/// Entries worse than this are re-measured with wider and narrower stencils
/// and the best agreement is kept. A ReLU kink within `h` of the point
/// spoils the narrow differences; loss rounding (~1e-12 on a full model)
/// swamps them when the true gradient is ~0. A wrong backward disagrees
/// with all widths.
pub const RETRY_ABOVE: f64 = 1e-6;

/// Stencil widths tried after `h`, as multiples of it.
const RETRY_SCALES: [f64; 4] = [0.25, 16.0, 0.1, 0.01];

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
    /// Worst relative error per tensor.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
            per_tensor: Vec::new(),
        }
    }

    fn record(&mut self, name: &str, idx: usize, e: f64) -> f64 {
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = e;
            self.worst = format!("{name}[{idx}]");
        }
        e
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval(g: &mut Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return invalid(format!("loss must be scalar, got {:?}", t.shape()));
    }
    Ok(t.item())
}

/// Checks every element of every input of `f`.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport::new();
    for (k, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape());
        let analytic = grads.wrt(vars[k]).unwrap_or(&zero);
        let name = format!("input{k}");
        let mut worst = 0.0f64;
        for i in 0..input.len() {
            let at = |delta: f64| -> Result<f64> {
                let mut g = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] += delta;
                        }
                        g.input(t)
                    })
                    .collect();
                let l = f(&mut g, &vs)?;
                eval(&mut g, l)
            };
            let a = analytic.data()[i];
            let mut e = rel_error(a, (at(h)? - at(-h)?) / (2.0 * h));
            for k in RETRY_SCALES {
                if e > RETRY_ABOVE {
                    let q = h * k;
                    e = e.min(rel_error(a, (at(q)? - at(-q)?) / (2.0 * q)));
                }
            }
            worst = worst.max(report.record(&name, i, e));
        }
        report.per_tensor.push((name, worst));
    }
    Ok(report)
}

/// Checks up to `max_per_tensor` randomly chosen entries of every trainable
/// parameter. The store must be in 64-bit mode.
pub fn check_params<F>(
    store: &mut ParamStore,
    h: f64,
    max_per_tensor: usize,
    seed: u64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if store.precision() != Precision::F64 {
        return invalid("gradient checks need a 64-bit parameter store");
    }
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::new();
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        let p = store.get(id);
        let name = p.name.clone();
        let n = p.value.len();
        let zero = Tensor::zeros(p.value.shape());
        let analytic = grads.param(store, id).unwrap_or(&zero).clone();
        let picks: Vec<usize> = if n <= max_per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, max_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = 0.0f64;
        for i in picks {
            let orig = store.get(id).value.data()[i];
            let mut at = |v: f64, store: &mut ParamStore| -> Result<f64> {
                store.get_mut(id).value.data_mut()[i] = v;
                let mut g = Graph::new();
                let l = f(&mut g, store)?;
                eval(&mut g, l)
            };
            let a = analytic.data()[i];
            let mut e = rel_error(a, (at(orig + h, store)? - at(orig - h, store)?) / (2.0 * h));
            for k in RETRY_SCALES {
                if e > RETRY_ABOVE {
                    let q = h * k;
                    e = e.min(rel_error(a, (at(orig + q, store)? - at(orig - q, store)?) / (2.0 * q)));
                }
            }
            store.get_mut(id).value.data_mut()[i] = orig;
            worst = worst.max(report.record(&name, i, e));
        }
        report.per_tensor.push((name, worst));
    }
    Ok(report)
}
