//! Multi-task objective: `alpha * l_enh + beta * l_am`, with
//! `l_enh = -SI-SNR`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::ops::{self, SiSnrOptions};
use crate::nn::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return invalid(format!("loss weights must be finite and >= 0, got {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_enh: f64,
    pub l_am: f64,
    pub l_total: f64,
}

/// `alpha * l_enh + beta * l_am` for plain numbers.
pub fn total_loss_value(l_enh: f64, l_am: f64, w: LossWeights) -> f64 {
    w.alpha * l_enh + w.beta * l_am
}

/// Negative SI-SNR averaged over the batch: `est: [B, N]`, `reference: [B, N]`.
pub fn enhancement_loss(g: &mut Graph, est: Var, reference: &Tensor, opts: SiSnrOptions) -> Result<Var> {
    let s = ops::si_snr(g, est, reference, opts)?;
    let m = ops::mean(g, s);
    Ok(ops::scale(g, m, -1.0))
}

/// Differentiable total loss. A zero weight drops its term from the graph,
/// so `beta = 0` yields exactly the gradients of `l_enh` alone.
pub fn total_loss(g: &mut Graph, l_enh: Var, l_am: Option<Var>, w: LossWeights) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let e = g.value(l_enh).item();
    let a = l_am.map(|v| g.value(v).item()).unwrap_or(0.0);
    let mut terms = vec![(l_enh, w.alpha)];
    if let Some(am) = l_am.filter(|_| w.beta != 0.0) {
        terms.push((am, w.beta));
    }
    let total = ops::weighted_sum(g, &terms)?;
    let breakdown = LossBreakdown {
        l_enh: e,
        l_am: a,
        l_total: g.value(total).item(),
    };
    Ok((total, breakdown))
}
