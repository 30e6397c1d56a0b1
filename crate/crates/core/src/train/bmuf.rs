//! Blockwise model-update filtering over simulated workers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::nn::{ParamKind, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BmufConfig {
    pub workers: usize,
    /// Local steps per worker between synchronizations.
    pub sync_period: usize,
    pub block_momentum: f64,
    pub block_lr: f64,
    pub nesterov: bool,
    /// Zero each worker's Adam moments after every sync (default: keep).
    pub reset_adam: bool,
}

impl Default for BmufConfig {
    fn default() -> Self {
        BmufConfig {
            workers: 2,
            sync_period: 16,
            block_momentum: 0.9,
            block_lr: 1.0,
            nesterov: false,
            reset_adam: false,
        }
    }
}

impl BmufConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.block_momentum) {
            return invalid(format!("block momentum must lie in [0, 1), got {}", self.block_momentum));
        }
        if !(self.block_lr > 0.0) || !self.block_lr.is_finite() {
            return invalid(format!("block learning rate must be > 0, got {}", self.block_lr));
        }
        if self.sync_period == 0 || self.workers == 0 {
            return invalid("sync period and worker count must be at least 1");
        }
        Ok(())
    }
}

/// Filter state: one `G` per trainable weight of the global store.
#[derive(Clone, Debug)]
pub struct BmufState {
    pub config: BmufConfig,
    pub filtered: Vec<Tensor>,
    pub rounds: u64,
}

fn filtered_ids(store: &ParamStore) -> Vec<usize> {
    store
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable && p.kind == ParamKind::Weight)
        .map(|(i, _)| i)
        .collect()
}

impl BmufState {
    pub fn new(config: BmufConfig, global: &ParamStore) -> Result<Self> {
        config.validate()?;
        let filtered = filtered_ids(global)
            .into_iter()
            .map(|i| Tensor::zeros(global.iter().nth(i).unwrap().value.shape()))
            .collect();
        Ok(BmufState {
            config,
            filtered,
            rounds: 0,
        })
    }

    /// Parameters workers restart from: `W_g`, or `W_g + eta G` with Nesterov.
    pub fn restart_point(&self, global: &ParamStore) -> ParamStore {
        let mut s = global.clone();
        if self.config.nesterov {
            let eta = self.config.block_momentum;
            let prec = s.precision();
            let ids: Vec<_> = s.ids().collect();
            for (k, i) in filtered_ids(global).into_iter().enumerate() {
                let p = s.get_mut(ids[i]);
                for (w, g) in p.value.data_mut().iter_mut().zip(self.filtered[k].data()) {
                    *w = prec.round(*w + eta * g);
                }
            }
        }
        s
    }

    /// Named `G` tensors for checkpointing.
    pub fn state_tensors(&self, global: &ParamStore, prefix: &str) -> Vec<(String, Tensor)> {
        let names: Vec<&str> = global.iter().map(|p| p.name.as_str()).collect();
        let mut out: Vec<(String, Tensor)> = filtered_ids(global)
            .into_iter()
            .zip(&self.filtered)
            .map(|(i, g)| (format!("{prefix}G/{}", names[i]), g.clone()))
            .collect();
        out.push((format!("{prefix}rounds"), Tensor::scalar(self.rounds as f64)));
        out
    }

    pub fn load_state(&mut self, global: &ParamStore, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<&str> = global.iter().map(|p| p.name.as_str()).collect();
        let find = |n: String| {
            tensors
                .iter()
                .find(|(k, _)| *k == n)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| crate::Error::InvalidArgument(format!("checkpoint lacks {n}")))
        };
        for (k, i) in filtered_ids(global).into_iter().enumerate() {
            let t = find(format!("{prefix}G/{}", names[i]))?;
            if t.shape() != self.filtered[k].shape() {
                return shape_err(format!("BMUF state for {} has shape {:?}", names[i], t.shape()));
            }
            self.filtered[k] = t;
        }
        self.rounds = find(format!("{prefix}rounds"))?.item() as u64;
        Ok(())
    }
}

/// One synchronization: `Delta = mean_k W_k - W_g`, `G <- eta G + zeta Delta`,
/// `W_g <- W_g + G`. Buffers (batch-norm statistics) are plain averages.
///
/// The update is evaluated as `zeta mean + (1 - zeta) W_g + eta G_old`,
/// skipping zero-coefficient terms, which equals `W_g + G` algebraically and
/// is exact in the degenerate `eta = 0, zeta = 1` case.
pub fn bmuf_round(state: &mut BmufState, global: &mut ParamStore, replicas: &[&ParamStore]) -> Result<()> {
    if replicas.is_empty() {
        return invalid("BMUF round needs at least one replica");
    }
    for r in replicas {
        if r.len() != global.len() || r.iter().zip(global.iter()).any(|(a, b)| a.value.shape() != b.value.shape() || a.name != b.name) {
            return shape_err("replica parameters do not match the global model");
        }
    }
    let (eta, zeta) = (state.config.block_momentum, state.config.block_lr);
    let prec = global.precision();
    let k = replicas.len() as f64;
    let ids: Vec<_> = global.ids().collect();
    let mut fk = 0;
    for id in ids {
        let mut mean = vec![0.0; global.get(id).value.len()];
        for r in replicas {
            for (m, v) in mean.iter_mut().zip(r.get(id).value.data()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k);
        let p = global.get_mut(id);
        if p.kind == ParamKind::Buffer {
            p.value.data_mut().copy_from_slice(&mean);
            prec.round_tensor(&mut p.value);
            continue;
        }
        if !p.trainable {
            continue;
        }
        let g = state.filtered[fk].data_mut();
        fk += 1;
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let g_old = g[j];
            g[j] = prec.round(eta * g_old + zeta * (mean[j] - *w));
            let mut next = zeta * mean[j];
            if zeta != 1.0 {
                next += (1.0 - zeta) * *w;
            }
            if eta != 0.0 {
                next += eta * g_old;
            }
            *w = prec.round(next);
        }
    }
    state.rounds += 1;
    Ok(())
}
