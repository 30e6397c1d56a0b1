//! Parameterized layers: thin wrappers that own [`ParamId`]s and call the ops.

use rand::Rng;

use super::ops::{self, Conv2dSpec, BN_EPS};
use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Whether normalization layers use batch statistics (and update running
/// averages) or their stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel.0 * kernel.1;
        let weight = store.add_kaiming(&format!("{name}.weight"), &[cout, cin, kernel.0, kernel.1], fan_in, rng);
        // non-zero like the weights: a zero bias puts all-zero patches exactly on a ReLU kink
        let bias = bias.then(|| store.add_kaiming(&format!("{name}.bias"), &[cout], fan_in, rng));
        Conv2d { weight, bias, spec }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        ops::conv2d(g, x, w, b, self.spec)
    }
}

/// Kernel-size-1 convolution over `[B, C, T]`, i.e. a per-frame linear map.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Pointwise {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add_kaiming(&format!("{name}.weight"), &[cout, cin], cin, rng);
        let bias = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[cout])));
        Pointwise { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        ops::pointwise(g, x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Depthwise {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl Depthwise {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_kaiming(&format!("{name}.weight"), &[channels, kernel], kernel, rng);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[channels]));
        Depthwise { weight, bias, dilation }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        ops::depthwise_causal(g, x, w, b, self.dilation)
    }
}

#[derive(Clone, Debug)]
pub struct PRelu {
    pub alpha: ParamId,
}

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        PRelu {
            alpha: store.add(&format!("{name}.alpha"), Tensor::scalar(0.25)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = g.param(store, self.alpha);
        ops::prelu(g, x, a)
    }
}

/// Batch normalization with running statistics (momentum 0.1, unbiased
/// running variance).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            momentum: 0.1,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Eval => ops::batch_norm_eval(
                g,
                x,
                gamma,
                beta,
                store.value(self.running_mean).data(),
                store.value(self.running_var).data(),
                BN_EPS,
            ),
            Mode::Train => {
                let (y, stats) = ops::batch_norm_train(g, x, gamma, beta, BN_EPS)?;
                let m = self.momentum;
                let unbias = stats.count as f64 / (stats.count - 1) as f64;
                let blend = |old: &Tensor, new: &[f64], k: f64| {
                    let d = old.data().iter().zip(new).map(|(o, n)| (1.0 - m) * o + m * n * k).collect();
                    Tensor::new(old.shape(), d).expect("channel count")
                };
                let rm = blend(store.value(self.running_mean), &stats.mean, 1.0);
                let rv = blend(store.value(self.running_var), &stats.var, unbias);
                g.push_buffer_update(self.running_mean, rm);
                g.push_buffer_update(self.running_var, rv);
                Ok(y)
            }
        }
    }
}

/// Layer normalization over channels of `[B, C, T]`, optionally cumulative
/// over time (causal).
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub cumulative: bool,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cumulative: bool) -> Self {
        Norm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            cumulative,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        ops::layer_norm(g, x, gamma, beta, self.cumulative)
    }
}

/// Applies queued running-statistics updates to the store.
pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
    for (id, t) in updates {
        store.set_value(id, t)?;
    }
    Ok(())
}
