use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamStore, Tensor};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// L2 penalty added to the gradient before the moment updates.
    #[default]
    Coupled,
    /// Weight decay applied directly to the parameters (AdamW).
    Decoupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            decay_mode: DecayMode::Coupled,
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepReport {
    pub updated: usize,
    /// Tensors skipped because their gradient had a non-finite entry.
    pub rejected: usize,
}

/// Adam with bias correction. Moments live alongside the parameters they
/// track and follow the store's precision.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    rejected_total: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            rejected_total: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn rejected_total(&self) -> u64 {
        self.rejected_total
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<StepReport> {
        if self.m.len() != store.len() {
            return invalid("optimizer state does not match the parameter store");
        }
        let c = self.config;
        let prec = store.precision();
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut report = StepReport::default();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            if !p.trainable || p.kind != ParamKind::Weight {
                continue;
            }
            if !p.grad.all_finite() {
                report.rejected += 1;
                self.rejected_total += 1;
                log::warn!("non-finite gradient for {}; update skipped", p.name);
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
                let mut gr = p.grad.data()[j];
                if c.decay_mode == DecayMode::Coupled {
                    gr += c.weight_decay * *theta;
                }
                m[j] = prec.round(c.beta1 * m[j] + (1.0 - c.beta1) * gr);
                v[j] = prec.round(c.beta2 * v[j] + (1.0 - c.beta2) * gr * gr);
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut next = *theta - c.lr * mhat / (vhat.sqrt() + c.eps);
                if c.decay_mode == DecayMode::Decoupled {
                    next -= c.lr * c.weight_decay * *theta;
                }
                *theta = prec.round(next);
            }
            if !p.value.all_finite() {
                return Err(crate::Error::Numerical(format!(
                    "parameter {} became non-finite",
                    p.name
                )));
            }
            report.updated += 1;
        }
        Ok(report)
    }

    /// Restarts the moment estimates and step count.
    pub fn reset(&mut self) {
        self.step = 0;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Named state tensors for checkpointing.
    pub fn state_tensors(&self, store: &ParamStore, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (p, (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("{prefix}m/{}", p.name), m.clone()));
            out.push((format!("{prefix}v/{}", p.name), v.clone()));
        }
        out.push((format!("{prefix}step"), Tensor::scalar(self.step as f64)));
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |name: String| {
            tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| crate::Error::InvalidArgument(format!("checkpoint lacks {name}")))
        };
        for (i, p) in store.iter().enumerate() {
            let m = find(format!("{prefix}m/{}", p.name))?;
            let v = find(format!("{prefix}v/{}", p.name))?;
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return invalid(format!("optimizer state for {} has the wrong shape", p.name));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        self.step = find(format!("{prefix}step"))?.item() as u64;
        Ok(())
    }
}
