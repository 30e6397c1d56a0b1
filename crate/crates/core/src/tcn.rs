//! Causal temporal convolutional network (Conv-TasNet separation module with
//! skip connections) estimating a complex mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::nn::layers::{Depthwise, Norm, PRelu, Pointwise};
use crate::nn::{ops, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskActivation {
    /// Unbounded real/imaginary planes.
    #[default]
    Linear,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcnConfig {
    pub input_dim: usize,
    /// B
    pub bottleneck: usize,
    /// H
    pub hidden: usize,
    /// P
    pub kernel: usize,
    /// X
    pub blocks: usize,
    /// R
    pub repeats: usize,
    /// Frequency bins F; the mask has 2F rows.
    pub bins: usize,
    pub mask_activation: MaskActivation,
    /// Start from an identity mask (real-plane bias 1).
    pub identity_init: bool,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self::desk(1000, 257)
    }
}

impl TcnConfig {
    pub fn paper() -> Self {
        TcnConfig {
            bottleneck: 128,
            hidden: 512,
            blocks: 8,
            repeats: 3,
            ..Self::desk(1000, 257)
        }
    }

    pub fn desk(input_dim: usize, bins: usize) -> Self {
        TcnConfig {
            input_dim,
            bottleneck: 16,
            hidden: 32,
            kernel: 3,
            blocks: 4,
            repeats: 2,
            bins,
            mask_activation: MaskActivation::Linear,
            identity_init: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.input_dim, self.bottleneck, self.hidden, self.kernel, self.blocks, self.repeats, self.bins].contains(&0) {
            return invalid("TCN dimensions must be positive");
        }
        Ok(())
    }

    /// Frames seen by one repeat: `1 + (P - 1)(2^X - 1)`.
    pub fn receptive_field_per_repeat(&self) -> usize {
        1 + (self.kernel - 1) * ((1 << self.blocks) - 1)
    }

    /// Past frames seen by the whole stack.
    pub fn past_context(&self) -> usize {
        self.repeats * (self.kernel - 1) * ((1 << self.blocks) - 1)
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv_in: Pointwise,
    act1: PRelu,
    norm1: Norm,
    depthwise: Depthwise,
    act2: PRelu,
    norm2: Norm,
    /// Absent on the last block, whose residual output would be unused.
    residual: Option<Pointwise>,
    skip: Pointwise,
}

#[derive(Clone, Debug)]
pub struct Tcn {
    pub config: TcnConfig,
    in_norm: Norm,
    in_proj: Pointwise,
    blocks: Vec<Block>,
    out_act: PRelu,
    out_proj: Pointwise,
}

impl Tcn {
    pub fn build(store: &mut ParamStore, cfg: &TcnConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (b, h) = (cfg.bottleneck, cfg.hidden);
        let in_norm = Norm::new(store, "tcn.in_norm", cfg.input_dim, true);
        let in_proj = Pointwise::new(store, "tcn.in_proj", cfg.input_dim, b, true, rng);
        let total = cfg.blocks * cfg.repeats;
        let mut blocks = Vec::with_capacity(total);
        for r in 0..cfg.repeats {
            for x in 0..cfg.blocks {
                let name = format!("tcn.block{r}.{x}");
                let last = blocks.len() + 1 == total;
                blocks.push(Block {
                    conv_in: Pointwise::new(store, &format!("{name}.conv_in"), b, h, true, rng),
                    act1: PRelu::new(store, &format!("{name}.act1")),
                    norm1: Norm::new(store, &format!("{name}.norm1"), h, true),
                    depthwise: Depthwise::new(store, &format!("{name}.depthwise"), h, cfg.kernel, 1 << x, rng),
                    act2: PRelu::new(store, &format!("{name}.act2")),
                    norm2: Norm::new(store, &format!("{name}.norm2"), h, true),
                    residual: (!last).then(|| Pointwise::new(store, &format!("{name}.residual"), h, b, true, rng)),
                    skip: Pointwise::new(store, &format!("{name}.skip"), h, b, true, rng),
                });
            }
        }
        let out_act = PRelu::new(store, "tcn.out_act");
        let out_proj = Pointwise::new(store, "tcn.out_proj", b, 2 * cfg.bins, true, rng);
        if cfg.identity_init && cfg.mask_activation == MaskActivation::Linear {
            let bias = out_proj.bias.expect("bias");
            let f = cfg.bins;
            store.set_value(bias, Tensor::new(&[2 * f], (0..2 * f).map(|i| if i < f { 1.0 } else { 0.0 }).collect())?)?;
        }
        Ok(Tcn {
            config: cfg.clone(),
            in_norm,
            in_proj,
            blocks,
            out_act,
            out_proj,
        })
    }

    /// `[B, input_dim, T]` → mask planes `[B, 2F, T]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.config.input_dim {
            return shape_err(format!("TCN expects [B, {}, T], got {s:?}", self.config.input_dim));
        }
        let x = self.in_norm.forward(g, store, x)?;
        let mut y = self.in_proj.forward(g, store, x)?;
        let mut skip_sum: Option<Var> = None;
        for blk in &self.blocks {
            let h = blk.conv_in.forward(g, store, y)?;
            let h = blk.act1.forward(g, store, h)?;
            let h = blk.norm1.forward(g, store, h)?;
            let h = blk.depthwise.forward(g, store, h)?;
            let h = blk.act2.forward(g, store, h)?;
            let h = blk.norm2.forward(g, store, h)?;
            let sk = blk.skip.forward(g, store, h)?;
            skip_sum = Some(match skip_sum {
                Some(acc) => ops::add(g, acc, sk)?,
                None => sk,
            });
            if let Some(res) = &blk.residual {
                let r = res.forward(g, store, h)?;
                y = ops::add(g, y, r)?;
            }
        }
        let z = self.out_act.forward(g, store, skip_sum.expect("at least one block"))?;
        let m = self.out_proj.forward(g, store, z)?;
        Ok(match self.config.mask_activation {
            MaskActivation::Linear => m,
            MaskActivation::Tanh => ops::tanh(g, m),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TcnConfig {
        TcnConfig {
            input_dim: 6,
            bottleneck: 4,
            hidden: 5,
            kernel: 3,
            blocks: 2,
            repeats: 2,
            bins: 3,
            mask_activation: MaskActivation::Linear,
            identity_init: false,
        }
    }

    #[test]
    fn receptive_field_formula() {
        let p = TcnConfig::paper();
        assert_eq!(p.receptive_field_per_repeat(), 511);
        assert_eq!(p.past_context(), 1530);
    }

    #[test]
    fn future_frames_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new(Precision::F64);
        let tcn = Tcn::build(&mut store, &tiny(), &mut rng).unwrap();
        let t = 20;
        let x: Vec<f64> = (0..6 * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |x: Vec<f64>| {
            let mut g = Graph::new();
            let v = g.constant(Tensor::new(&[1, 6, t], x).unwrap());
            let y = tcn.forward(&mut g, &store, v).unwrap();
            g.value(y).clone()
        };
        let a = run(x.clone());
        let cut = 11;
        let mut x2 = x;
        for c in 0..6 {
            for tt in cut..t {
                x2[c * t + tt] += 3.0;
            }
        }
        let b = run(x2);
        for r in 0..6 {
            for tt in 0..t {
                let same = a.data()[r * t + tt].to_bits() == b.data()[r * t + tt].to_bits();
                assert_eq!(same, tt < cut, "row {r} frame {tt}");
            }
        }
    }

    #[test]
    fn identity_init_gives_unit_mask_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new(Precision::F64);
        let cfg = TcnConfig {
            identity_init: true,
            ..tiny()
        };
        let tcn = Tcn::build(&mut store, &cfg, &mut rng).unwrap();
        let b = store.value(tcn.out_proj.bias.unwrap());
        assert_eq!(b.data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
