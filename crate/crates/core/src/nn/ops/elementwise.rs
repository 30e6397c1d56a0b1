use crate::error::{shape_err, Result};
use crate::nn::{Backward, Graph, Tensor, Var};

#[derive(Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
}

struct UnaryOp(Unary);

impl Backward for UnaryOp {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0].data();
        let y = out.data();
        let data = grad
            .data()
            .iter()
            .enumerate()
            .map(|(i, &g)| match self.0 {
                Unary::Relu => {
                    if x[i] > 0.0 {
                        g
                    } else {
                        0.0
                    }
                }
                Unary::Sigmoid => g * y[i] * (1.0 - y[i]),
                Unary::Tanh => g * (1.0 - y[i] * y[i]),
            })
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape(), data)?)])
    }
}

fn unary(g: &mut Graph, x: Var, kind: Unary) -> Var {
    let out = g.value(x).map(|v| match kind {
        Unary::Relu => v.max(0.0),
        Unary::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        Unary::Tanh => v.tanh(),
    });
    g.apply(Box::new(UnaryOp(kind)), &[x], out)
}

pub fn relu(g: &mut Graph, x: Var) -> Var {
    unary(g, x, Unary::Relu)
}

pub fn sigmoid(g: &mut Graph, x: Var) -> Var {
    unary(g, x, Unary::Sigmoid)
}

pub fn tanh(g: &mut Graph, x: Var) -> Var {
    unary(g, x, Unary::Tanh)
}

struct PreluOp;

impl Backward for PreluOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, a) = (inputs[0], inputs[1].item());
        let dx = needs[0].then(|| {
            let d = x
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&v, &g)| if v > 0.0 { g } else { a * g })
                .collect();
            Tensor::new(x.shape(), d).expect("same shape")
        });
        let da = needs[1].then(|| {
            let s = x
                .data()
                .iter()
                .zip(grad.data())
                .filter(|(&v, _)| v <= 0.0)
                .map(|(&v, &g)| v * g)
                .sum();
            Tensor::scalar(s)
        });
        Ok(vec![dx, da])
    }
}

/// Parametric ReLU with a single shared slope `alpha: [1]`.
pub fn prelu(g: &mut Graph, x: Var, alpha: Var) -> Result<Var> {
    if g.value(alpha).len() != 1 {
        return shape_err("prelu slope must be a single value");
    }
    let a = g.value(alpha).item();
    let out = g.value(x).map(|v| if v > 0.0 { v } else { a * v });
    Ok(g.apply(Box::new(PreluOp), &[x, alpha], out))
}

/// Linear combination `sum_i w_i x_i` of same-shaped values.
///
/// Terms with weight exactly zero receive no gradient at all, so disabling a
/// branch this way leaves the remaining gradients bit-identical.
struct WeightedSumOp(Vec<f64>);

impl Backward for WeightedSumOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(self
            .0
            .iter()
            .zip(needs)
            .zip(inputs)
            .map(|((&w, &need), _)| {
                if !need || w == 0.0 {
                    None
                } else if w == 1.0 {
                    Some(grad.clone())
                } else {
                    Some(grad.map(|v| v * w))
                }
            })
            .collect())
    }
}

pub fn weighted_sum(g: &mut Graph, terms: &[(Var, f64)]) -> Result<Var> {
    let Some(&(first, _)) = terms.first() else {
        return shape_err("weighted sum of nothing");
    };
    let shape = g.shape(first).to_vec();
    let mut out = Tensor::zeros(&shape);
    for &(v, w) in terms {
        if g.shape(v) != shape.as_slice() {
            return shape_err(format!(
                "weighted sum: shape {:?} differs from {:?}",
                g.shape(v),
                shape
            ));
        }
        for (o, x) in out.data_mut().iter_mut().zip(g.value(v).data()) {
            *o += w * x;
        }
    }
    let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
    let weights = terms.iter().map(|t| t.1).collect();
    Ok(g.apply(Box::new(WeightedSumOp(weights)), &vars, out))
}

pub fn add(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    weighted_sum(g, &[(a, 1.0), (b, 1.0)])
}

pub fn sub(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    weighted_sum(g, &[(a, 1.0), (b, -1.0)])
}

pub fn scale(g: &mut Graph, x: Var, k: f64) -> Var {
    weighted_sum(g, &[(x, k)]).expect("single term")
}

struct MulOp;

impl Backward for MulOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let prod = |other: &Tensor| {
            let d = grad.data().iter().zip(other.data()).map(|(g, o)| g * o).collect();
            Tensor::new(other.shape(), d).expect("same shape")
        };
        Ok(vec![
            needs[0].then(|| prod(inputs[1])),
            needs[1].then(|| prod(inputs[0])),
        ])
    }
}

/// Elementwise product of two same-shaped values.
pub fn mul(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return shape_err(format!("mul: {:?} vs {:?}", g.shape(a), g.shape(b)));
    }
    let d = g
        .value(a)
        .data()
        .iter()
        .zip(g.value(b).data())
        .map(|(x, y)| x * y)
        .collect();
    let out = Tensor::new(g.shape(a), d)?;
    Ok(g.apply(Box::new(MulOp), &[a, b], out))
}

struct SumOp(f64);

impl Backward for SumOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), grad.item() * self.0))])
    }
}

/// Sum of all elements, as a `[1]` value.
pub fn sum(g: &mut Graph, x: Var) -> Var {
    let s = g.value(x).sum();
    g.apply(Box::new(SumOp(1.0)), &[x], Tensor::scalar(s))
}

/// Mean of all elements, as a `[1]` value.
pub fn mean(g: &mut Graph, x: Var) -> Var {
    let n = g.value(x).len().max(1) as f64;
    let s = g.value(x).sum() / n;
    g.apply(Box::new(SumOp(1.0 / n)), &[x], Tensor::scalar(s))
}
