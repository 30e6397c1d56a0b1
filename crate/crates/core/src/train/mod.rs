//! Multi-task training: `alpha * (-SI-SNR) + beta * CE(frozen AM)`, Adam,
//! simulated multi-worker BMUF, gradient checks and resumable runs.

mod bmuf;
mod run;

pub use bmuf::{bmuf_round, BmufConfig, BmufState};
pub use run::{load_examples, run_training, LogRecord, TrainSummary, Trainer, BEST_CKPT, LAST_CKPT, LOG_FILE};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::am::{am_loss, clean_labels, AcousticModel, Codebook};
use crate::dsp::Waveform;
use crate::error::{invalid, shape_err, Error, Result};
use crate::frontend::FixedFeatures;
use crate::losses::{enhancement_loss, total_loss, LossBreakdown, LossWeights};
use crate::model::EnhancementModel;
use crate::nn::gradcheck::{check_params, GradCheckReport};
use crate::nn::layers::{apply_buffer_updates, Mode};
use crate::nn::ops::SiSnrOptions;
use crate::nn::{Adam, AdamConfig, Graph, ParamStore, Precision, Tensor, Var};

/// Fewest entries per tensor a model gradient check samples.
pub const MIN_CHECKED_PER_TENSOR: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Learning rate 1e-3, weight decay 1e-5.
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    pub am_checkpoint: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub dev_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Simulated multi-worker training; serial Adam when unset.
    pub bmuf: Option<BmufConfig>,
    /// Worker threads for BMUF (results do not depend on it).
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            batch_size: 4,
            epochs: 10,
            seed: 0,
            precision: Precision::F32,
            grad_clip: None,
            am_checkpoint: None,
            train_data: None,
            dev_data: None,
            out_dir: PathBuf::from("runs/train"),
            bmuf: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return invalid("batch size must be at least 1");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return invalid("gradient clip must be positive");
            }
        }
        if !(self.adam.lr > 0.0) {
            return invalid("learning rate must be positive");
        }
        if let Some(b) = &self.bmuf {
            b.validate()?;
        }
        Ok(())
    }
}

/// The frozen acoustic model and the codebook its labels come from.
#[derive(Clone, Debug)]
pub struct FrozenAm {
    pub model: AcousticModel,
    pub codebook: Codebook,
}

impl FrozenAm {
    pub fn new(mut model: AcousticModel, codebook: Codebook) -> Self {
        model.freeze();
        FrozenAm { model, codebook }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, c) = AcousticModel::load(path)?;
        Ok(FrozenAm::new(m, c))
    }

    /// Checks that the AM reads the enhancer's spectra.
    pub fn check_compatible(&self, model: &EnhancementModel) -> Result<()> {
        let bins = model.config.frame.bins();
        if self.model.config.input_dim != bins || self.codebook.dim() != bins {
            return shape_err(format!(
                "acoustic model reads {} bins, enhancer produces {bins}",
                self.model.config.input_dim
            ));
        }
        Ok(())
    }
}

/// One utterance with everything a step needs precomputed.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    /// `[1, C, N]`
    pub input: Tensor,
    pub fixed: FixedFeatures,
    pub target: Vec<f64>,
    /// Frame labels of the target; present when an AM is in use.
    pub labels: Option<Vec<usize>>,
}

impl Example {
    pub fn prepare(model: &EnhancementModel, id: impl Into<String>, mixture: &Waveform, target: Vec<f64>, am: Option<&FrozenAm>) -> Result<Self> {
        if target.len() != mixture.len() {
            return shape_err(format!(
                "target has {} samples, mixture {}",
                target.len(),
                mixture.len()
            ));
        }
        let input = model.batch(&[mixture])?;
        let fixed = model.features(&input)?;
        let labels = am
            .map(|a| clean_labels(&target, model.stft(), &a.codebook))
            .transpose()?;
        Ok(Example {
            id: id.into(),
            input,
            fixed,
            target,
            labels,
        })
    }
}

/// A stacked batch of equal-length examples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub input: Tensor,
    pub fixed: FixedFeatures,
    /// `[B, N]`
    pub targets: Tensor,
    pub labels: Option<Vec<usize>>,
}

fn stack(ts: &[&Tensor]) -> Result<Tensor> {
    let inner = &ts[0].shape()[1..];
    let mut data = Vec::with_capacity(ts.len() * ts[0].len());
    let mut b = 0;
    for t in ts {
        if &t.shape()[1..] != inner {
            return shape_err(format!("cannot batch {:?} with {:?}", t.shape(), ts[0].shape()));
        }
        b += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![b];
    shape.extend_from_slice(inner);
    Tensor::new(&shape, data)
}

impl Batch {
    pub fn collate(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return invalid("empty batch");
        }
        let n = examples[0].target.len();
        if examples.iter().any(|e| e.target.len() != n) {
            return shape_err("batch items must have equal length");
        }
        let pick = |f: fn(&FixedFeatures) -> &Tensor| stack(&examples.iter().map(|e| f(&e.fixed)).collect::<Vec<_>>());
        let labels = if examples.iter().all(|e| e.labels.is_some()) {
            Some(examples.iter().flat_map(|e| e.labels.clone().unwrap()).collect())
        } else {
            None
        };
        Ok(Batch {
            ids: examples.iter().map(|e| e.id.clone()).collect(),
            input: stack(&examples.iter().map(|e| &e.input).collect::<Vec<_>>())?,
            fixed: FixedFeatures {
                lps: pick(|f| &f.lps)?,
                sdbf_lps: pick(|f| &f.sdbf_lps)?,
                ipd: pick(|f| &f.ipd)?,
                ch1: pick(|f| &f.ch1)?,
            },
            targets: Tensor::new(&[examples.len(), n], examples.iter().flat_map(|e| e.target.iter().copied()).collect())?,
            labels,
        })
    }
}

/// The AM weight actually applied: only variants with the AM branch use it.
pub fn effective_weights(model: &EnhancementModel, w: LossWeights) -> LossWeights {
    if model.variant().uses_am() {
        w
    } else {
        LossWeights { beta: 0.0, ..w }
    }
}

/// Builds the loss graph over `store`. `l_am` is evaluated whenever an AM
/// and labels are available, but only enters the total when `beta > 0`.
fn loss_graph(
    g: &mut Graph,
    model: &EnhancementModel,
    store: &ParamStore,
    batch: &Batch,
    am: Option<&FrozenAm>,
    w: LossWeights,
    mode: Mode,
) -> Result<(Var, LossBreakdown)> {
    let out = model.forward_with(g, store, &batch.input, &batch.fixed, mode)?;
    let l_enh = enhancement_loss(g, out.wave, &batch.targets, SiSnrOptions::default())?;
    let l_am = match (am, &batch.labels) {
        (Some(a), Some(labels)) => Some(am_loss(g, out.wave, labels, &a.model, model.stft())?),
        (None, _) if w.beta > 0.0 => return invalid("beta > 0 needs a frozen acoustic model"),
        (Some(_), None) if w.beta > 0.0 => return invalid("batch has no acoustic-model labels"),
        _ => None,
    };
    total_loss(g, l_enh, l_am, w)
}

/// Forward + backward; leaves fresh gradients in `model.store` and applies
/// the batch-norm statistic updates. Does not step the optimizer.
pub fn compute_gradients(batch: &Batch, model: &mut EnhancementModel, am: Option<&FrozenAm>, w: LossWeights) -> Result<LossBreakdown> {
    if let Some(a) = am {
        a.check_compatible(model)?;
    }
    let mut g = Graph::new();
    let (total, breakdown) = loss_graph(&mut g, model, &model.store, batch, am, w, Mode::Train)?;
    if !breakdown.l_total.is_finite() {
        log::error!("non-finite loss {breakdown:?} on batch {:?}", batch.ids);
        return Err(Error::Diverged(format!("loss {breakdown:?} on batch {:?}", batch.ids)));
    }
    let updates = g.take_buffer_updates();
    let grads = g.backward(total)?;
    model.store.zero_grad();
    grads.accumulate_into(&mut model.store);
    apply_buffer_updates(&mut model.store, updates)?;
    Ok(breakdown)
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| p.grad.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).grad.scale(k);
        }
    }
    norm
}

/// One optimizer step on `batch`. The AM is read-only throughout.
pub fn train_step(batch: &Batch, model: &mut EnhancementModel, am: Option<&FrozenAm>, adam: &mut Adam, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let w = effective_weights(model, cfg.loss);
    let breakdown = compute_gradients(batch, model, am, w)?;
    if let Some(c) = cfg.grad_clip {
        clip_gradients(&mut model.store, c);
    }
    adam.step(&mut model.store)?;
    Ok(breakdown)
}

/// Loss breakdown without gradients (batch norm in inference mode).
pub fn evaluate_loss(batch: &Batch, model: &EnhancementModel, am: Option<&FrozenAm>, w: LossWeights) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    Ok(loss_graph(&mut g, model, &model.store, batch, am, w, Mode::Eval)?.1)
}

/// Central-difference check of the full training loss over every trainable
/// tensor, sampling at least [`MIN_CHECKED_PER_TENSOR`] entries of each.
/// The model must be in 64-bit mode.
pub fn grad_check(
    model: &EnhancementModel,
    am: Option<&FrozenAm>,
    batch: &Batch,
    w: LossWeights,
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut store = model.store.clone();
    let per_tensor = per_tensor.max(MIN_CHECKED_PER_TENSOR);
    check_params(&mut store, h, per_tensor, seed, |g, s| {
        Ok(loss_graph(g, model, s, batch, am, w, Mode::Train)?.0)
    })
}
