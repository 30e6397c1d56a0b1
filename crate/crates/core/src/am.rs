//! Auxiliary acoustic model: a TDNN frame classifier over log-power spectra,
//! trained on clean speech against vector-quantized targets and then frozen.
//!
//! The classes are k-means centroids of clean LPS frames, a buildable
//! stand-in for the senone/biphone targets of a sequence-trained ASR model.
//! The loss keeps the same role: a fixed clean-speech classifier whose
//! cross-entropy penalizes enhanced outputs that do not look like clean
//! speech.

use std::path::Path;
use std::sync::Arc;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{lps as lps_of, Stft, LPS_FLOOR};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::layers::{Norm, Pointwise};
use crate::nn::{ops, Adam, AdamConfig, Checkpoint, Graph, ParamStore, Precision, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdnnConfig {
    pub input_dim: usize,
    pub num_blocks: usize,
    /// Block width D (input and output of every block).
    pub hidden: usize,
    pub bottleneck: usize,
    pub context: Vec<isize>,
    pub num_classes: usize,
    /// Per-utterance mean/variance normalization of each LPS bin.
    pub normalize_input: bool,
}

impl Default for TdnnConfig {
    fn default() -> Self {
        Self::desk(257)
    }
}

impl TdnnConfig {
    pub fn paper() -> Self {
        TdnnConfig {
            hidden: 1536,
            bottleneck: 512,
            num_classes: 3920,
            ..Self::desk(257)
        }
    }

    pub fn desk(input_dim: usize) -> Self {
        TdnnConfig {
            input_dim,
            num_blocks: 9,
            hidden: 96,
            bottleneck: 32,
            context: vec![-1, 0, 1],
            num_classes: 64,
            normalize_input: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.input_dim, self.num_blocks, self.hidden, self.bottleneck, self.num_classes].contains(&0) {
            return invalid("TDNN dimensions must be positive");
        }
        if self.context.is_empty() {
            return invalid("TDNN context offsets must not be empty");
        }
        Ok(())
    }

    /// Frames of context on either side over all blocks.
    pub fn total_context(&self) -> usize {
        let lo = self.context.iter().map(|o| o.unsigned_abs()).max().unwrap_or(0);
        lo * self.num_blocks
    }
}

#[derive(Clone, Debug)]
struct TdnnBlock {
    lin1: Pointwise,
    lin2: Pointwise,
    norm: Norm,
}

/// TDNN with its own parameter store, so it can be frozen and shared.
#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub config: TdnnConfig,
    pub store: ParamStore,
    input_proj: Pointwise,
    input_norm: Norm,
    blocks: Vec<TdnnBlock>,
    output: Pointwise,
}

impl AcousticModel {
    pub fn new(cfg: &TdnnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(Precision::F64);
        let d = cfg.hidden;
        let input_proj = Pointwise::new(&mut store, "am.input", cfg.input_dim, d, true, &mut rng);
        let input_norm = Norm::new(&mut store, "am.input_norm", d, false);
        let blocks = (0..cfg.num_blocks)
            .map(|i| TdnnBlock {
                lin1: Pointwise::new(&mut store, &format!("am.block{i}.lin1"), cfg.context.len() * d, cfg.bottleneck, false, &mut rng),
                lin2: Pointwise::new(&mut store, &format!("am.block{i}.lin2"), cfg.bottleneck, d, true, &mut rng),
                norm: Norm::new(&mut store, &format!("am.block{i}.norm"), d, false),
            })
            .collect();
        let output = Pointwise::new(&mut store, "am.output", d, cfg.num_classes, true, &mut rng);
        Ok(AcousticModel {
            config: cfg.clone(),
            store,
            input_proj,
            input_norm,
            blocks,
            output,
        })
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.num_trainable() == 0
    }

    /// LPS `[B, F, T]` → logits `[B, K, T]`.
    pub fn forward(&self, g: &mut Graph, lps: Var) -> Result<Var> {
        self.forward_with(g, &self.store, lps)
    }

    /// [`AcousticModel::forward`] reading parameters from `store`, a store
    /// with the same layout (e.g. a perturbed copy).
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, lps: Var) -> Result<Var> {
        let s = g.shape(lps).to_vec();
        if s.len() != 3 || s[1] != self.config.input_dim {
            return shape_err(format!("acoustic model expects [B, {}, T], got {s:?}", self.config.input_dim));
        }
        if s[2] <= self.config.total_context() {
            warn!(
                "{} frames is shorter than the {}-frame TDNN context; edges are replicated",
                s[2],
                self.config.total_context()
            );
        }
        let mut x = lps;
        if self.config.normalize_input {
            // normalize every bin over time: swap to [B, T, F] and normalize the "channel" axis
            let t = s[2];
            let xt = ops::swap_axes(g, x, 1)?;
            let one = g.constant(Tensor::full(&[t], 1.0));
            let zero = g.constant(Tensor::zeros(&[t]));
            let xn = ops::layer_norm(g, xt, one, zero, false)?;
            x = ops::swap_axes(g, xn, 1)?;
        }
        let h = self.input_proj.forward(g, store, x)?;
        let h = ops::relu(g, h);
        let mut h = self.input_norm.forward(g, store, h)?;
        for blk in &self.blocks {
            let sp = ops::splice(g, h, &self.config.context)?;
            let y = blk.lin1.forward(g, store, sp)?;
            let y = blk.lin2.forward(g, store, y)?;
            let y = ops::relu(g, y);
            let y = blk.norm.forward(g, store, y)?;
            h = ops::add(g, h, y)?;
        }
        self.output.forward(g, store, h)
    }

    /// Cross-entropy of the logits for `lps` against per-frame labels of
    /// every batch item, concatenated item-major.
    pub fn loss(&self, g: &mut Graph, lps: Var, labels: &[usize]) -> Result<Var> {
        self.loss_with(g, &self.store, lps, labels)
    }

    pub fn loss_with(&self, g: &mut Graph, store: &ParamStore, lps: Var, labels: &[usize]) -> Result<Var> {
        let s = g.shape(lps).to_vec();
        if labels.len() != s[0] * s[2] {
            return shape_err(format!(
                "{} labels for {} items x {} frames",
                labels.len(),
                s[0],
                s[2]
            ));
        }
        let logits = self.forward_with(g, store, lps)?;
        ops::cross_entropy(g, logits, labels)
    }

    pub fn to_checkpoint(&self, codebook: &Codebook) -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": "acoustic_model",
            "config": self.config,
            "num_classes": codebook.num_classes(),
        }));
        c.extend(self.store.named_values());
        c.push("codebook.centroids", codebook.centroids.clone());
        c
    }

    pub fn save(&self, codebook: &Codebook, path: &Path) -> Result<()> {
        self.to_checkpoint(codebook).save(path)
    }

    /// Loads a frozen model and its codebook.
    pub fn load(path: &Path) -> Result<(Self, Codebook)> {
        let c = Checkpoint::load(path)?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if c.metadata.get("kind").and_then(|k| k.as_str()) != Some("acoustic_model") {
            return Err(bad("not an acoustic-model checkpoint".into()));
        }
        let cfg: TdnnConfig = serde_json::from_value(c.metadata["config"].clone())?;
        let mut am = AcousticModel::new(&cfg, 0)?;
        let own: Vec<_> = c.tensors.iter().filter(|(n, _)| n.starts_with("am.")).cloned().collect();
        am.store.load_named(&own)?;
        am.freeze();
        let centroids = c
            .get("codebook.centroids")
            .ok_or_else(|| bad("missing codebook".into()))?
            .clone();
        Ok((am, Codebook::new(centroids)?))
    }
}

/// k-means centroids over LPS frames, `[K, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub centroids: Tensor,
}

impl Codebook {
    pub fn new(centroids: Tensor) -> Result<Self> {
        if centroids.ndim() != 2 || centroids.shape()[0] == 0 {
            return invalid("codebook must be a non-empty [K, F] matrix");
        }
        Ok(Codebook { centroids })
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    fn centroid(&self, k: usize) -> &[f64] {
        let f = self.dim();
        &self.centroids.data()[k * f..(k + 1) * f]
    }

    /// Nearest centroid (squared Euclidean); ties go to the lowest index.
    pub fn nearest(&self, frame: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.num_classes() {
            let d: f64 = self.centroid(k).iter().zip(frame).map(|(c, x)| (c - x) * (c - x)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    /// Lloyd's algorithm with k-means++ seeding over frames `[N, F]`.
    pub fn train(frames: &[Vec<f64>], k: usize, iterations: usize, seed: u64) -> Result<Self> {
        if frames.len() < k || k == 0 {
            return invalid(format!("{} frames cannot seed {k} centroids", frames.len()));
        }
        let f = frames[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut cents: Vec<Vec<f64>> = vec![frames[rng.random_range(0..frames.len())].clone()];
        let mut d2: Vec<f64> = frames.iter().map(|x| dist(x, &cents[0])).collect();
        while cents.len() < k {
            let total: f64 = d2.iter().sum();
            let next = if total <= 0.0 {
                rng.random_range(0..frames.len())
            } else {
                let mut r = rng.random::<f64>() * total;
                let mut pick = frames.len() - 1;
                for (i, &d) in d2.iter().enumerate() {
                    if r < d {
                        pick = i;
                        break;
                    }
                    r -= d;
                }
                pick
            };
            cents.push(frames[next].clone());
            let c = cents.last().unwrap();
            for (d, x) in d2.iter_mut().zip(frames) {
                *d = d.min(dist(x, c));
            }
        }
        let mut book = Codebook::new(Tensor::new(&[k, f], cents.concat())?)?;
        let mut labels = vec![usize::MAX; frames.len()];
        for it in 0..iterations {
            let mut changed = 0;
            for (l, x) in labels.iter_mut().zip(frames) {
                let n = book.nearest(x);
                if n != *l {
                    changed += 1;
                    *l = n;
                }
            }
            let mut sums = vec![0.0; k * f];
            let mut counts = vec![0usize; k];
            for (&l, x) in labels.iter().zip(frames) {
                counts[l] += 1;
                for (s, v) in sums[l * f..(l + 1) * f].iter_mut().zip(x) {
                    *s += v;
                }
            }
            let data = book.centroids.data_mut();
            for c in 0..k {
                // empty clusters keep their previous centroid
                if counts[c] > 0 {
                    for j in 0..f {
                        data[c * f + j] = sums[c * f + j] / counts[c] as f64;
                    }
                }
            }
            debug!("k-means iteration {it}: {changed} reassignments");
            if changed == 0 {
                break;
            }
        }
        Ok(book)
    }
}

/// Per-frame labels of an LPS map `[F, T]` (or `[1, F, T]`).
pub fn make_proxy_targets(lps: &Tensor, codebook: &Codebook) -> Result<Vec<usize>> {
    let s = lps.shape();
    let (f, t) = (s[s.len() - 2], s[s.len() - 1]);
    if lps.len() != f * t || f != codebook.dim() {
        return shape_err(format!("LPS {s:?} does not match codebook dim {}", codebook.dim()));
    }
    let mut frame = vec![0.0; f];
    Ok((0..t)
        .map(|ti| {
            for (k, v) in frame.iter_mut().enumerate() {
                *v = lps.data()[k * t + ti];
            }
            codebook.nearest(&frame)
        })
        .collect())
}

/// Proxy labels of a clean reference waveform.
pub fn clean_labels(clean: &[f64], stft: &Stft, codebook: &Codebook) -> Result<Vec<usize>> {
    make_proxy_targets(&lps_of(&stft.forward(clean)?, LPS_FLOOR)?, codebook)
}

/// Frames of an LPS map `[F, T]` as row vectors.
pub fn lps_frames(lps: &Tensor) -> Vec<Vec<f64>> {
    let s = lps.shape();
    let (f, t) = (s[s.len() - 2], s[s.len() - 1]);
    (0..t).map(|ti| (0..f).map(|k| lps.data()[k * t + ti]).collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub tdnn: TdnnConfig,
    pub kmeans_iterations: usize,
    pub max_epochs: usize,
    /// Stop once training accuracy improves by less than this over `patience` epochs.
    pub plateau_delta: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            tdnn: TdnnConfig::default(),
            kmeans_iterations: 50,
            max_epochs: 60,
            plateau_delta: 0.002,
            patience: 5,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub history: Vec<(f64, f64)>,
}

/// Frame accuracy of `am` over LPS maps with their labels.
pub fn frame_accuracy(am: &AcousticModel, data: &[(Tensor, Vec<usize>)]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (lps, labels) in data {
        let mut g = Graph::new();
        let x = g.constant(lps.clone());
        let logits = am.forward(&mut g, x)?;
        let v = g.value(logits);
        let (k, t) = (v.shape()[1], v.shape()[2]);
        for ti in 0..t {
            let mut best = 0;
            for c in 1..k {
                if v.data()[c * t + ti] > v.data()[best * t + ti] {
                    best = c;
                }
            }
            hit += usize::from(best == labels[ti]);
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Trains the codebook and the TDNN on clean reference-channel waveforms and
/// returns the frozen model.
pub fn pretrain_am(clean: &[Vec<f64>], stft: &Arc<Stft>, cfg: &PretrainConfig) -> Result<(AcousticModel, Codebook, PretrainReport)> {
    if clean.is_empty() {
        return invalid("pretraining needs at least one clean utterance");
    }
    let mut tdnn = cfg.tdnn.clone();
    tdnn.input_dim = stft.params().bins();
    let lps_maps: Vec<Tensor> = clean
        .iter()
        .map(|w| lps_of(&stft.forward(w)?, LPS_FLOOR))
        .collect::<Result<_>>()?;
    let frames: Vec<Vec<f64>> = lps_maps.iter().flat_map(lps_frames).collect();
    let codebook = Codebook::train(&frames, tdnn.num_classes, cfg.kmeans_iterations, cfg.seed)?;
    let data: Vec<(Tensor, Vec<usize>)> = lps_maps
        .into_iter()
        .map(|l| {
            let y = make_proxy_targets(&l, &codebook)?;
            Ok((l, y))
        })
        .collect::<Result<_>>()?;

    let mut am = AcousticModel::new(&tdnn, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam.clone(), &am.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa5a5);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    let mut best_acc = 0.0f64;
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            // batch only equal-length items together
            let t = data[chunk[0]].0.shape()[2];
            let items: Vec<usize> = chunk.iter().copied().filter(|&i| data[i].0.shape()[2] == t).collect();
            let f = tdnn.input_dim;
            let mut x = Vec::with_capacity(items.len() * f * t);
            let mut y = Vec::with_capacity(items.len() * t);
            for &i in &items {
                x.extend_from_slice(data[i].0.data());
                y.extend_from_slice(&data[i].1);
            }
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(&[items.len(), f, t], x)?);
            let loss = am.loss(&mut g, xv, &y)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("acoustic-model loss {lv} at epoch {epoch}")));
            }
            let grads = g.backward(loss)?;
            am.store.zero_grad();
            grads.accumulate_into(&mut am.store);
            adam.step(&mut am.store)?;
            loss_sum += lv;
            batches += 1;
        }
        let acc = frame_accuracy(&am, &data)?;
        let mean_loss = loss_sum / batches as f64;
        debug!("AM epoch {epoch}: loss {mean_loss:.4} accuracy {acc:.4}");
        history.push((mean_loss, acc));
        if acc > best_acc + cfg.plateau_delta {
            best_acc = acc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    am.freeze();
    let (final_loss, final_accuracy) = *history.last().unwrap_or(&(f64::NAN, 0.0));
    Ok((
        am,
        codebook,
        PretrainReport {
            epochs: history.len(),
            final_loss,
            final_accuracy,
            history,
        },
    ))
}

/// Cross-entropy of the frozen AM on the LPS of enhanced waveforms
/// `[B, N]` against clean-derived labels (item-major).
pub fn am_loss(g: &mut Graph, enhanced: Var, labels: &[usize], am: &AcousticModel, stft: &Arc<Stft>) -> Result<Var> {
    let spec = ops::stft(g, enhanced, stft)?;
    let l = ops::lps(g, spec, LPS_FLOOR)?;
    let s = g.shape(l).to_vec();
    if labels.len() != s[0] * s[2] {
        return shape_err(format!(
            "enhanced signal has {} frames per item but {} labels were given for {} items",
            s[2],
            labels.len(),
            s[0]
        ));
    }
    am.loss(g, l, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TdnnConfig {
        TdnnConfig {
            input_dim: 5,
            num_blocks: 2,
            hidden: 6,
            bottleneck: 3,
            context: vec![-1, 0, 1],
            num_classes: 4,
            normalize_input: false,
        }
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let book = Codebook::new(Tensor::new(&[3, 1], vec![0.0, 10.0, 0.0]).unwrap()).unwrap();
        assert_eq!(book.nearest(&[4.0]), 0);
        assert_eq!(book.nearest(&[5.0]), 0);
        assert_eq!(book.nearest(&[10.0]), 1);
    }

    #[test]
    fn logits_shape_and_time_invariance() {
        let am = AcousticModel::new(&tiny(), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 5, 9], (0..45).map(|i| (i / 9) as f64 * 0.3).collect()).unwrap());
        let y = am.forward(&mut g, x).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 4, 9]);
        for k in 0..4 {
            let row = &v.data()[k * 9..(k + 1) * 9];
            assert!(row.iter().all(|&r| (r - row[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut am = AcousticModel::new(&tiny(), 1).unwrap();
        let ids: Vec<_> = am.store.ids().collect();
        for id in ids {
            let shape = am.store.value(id).shape().to_vec();
            let name = am.store.get(id).name.clone();
            if name.starts_with("am.output") {
                am.store.set_value(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 5, 6], 0.7));
        let l = am.loss(&mut g, x, &[0, 1, 2, 3, 0, 1]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kmeans_finds_separated_clusters() {
        let mut frames = Vec::new();
        for i in 0..30 {
            let j = (i % 5) as f64 * 0.01;
            frames.push(vec![j, 0.0]);
            frames.push(vec![10.0 + j, 0.0]);
            frames.push(vec![0.0, 10.0 + j]);
        }
        let book = Codebook::train(&frames, 3, 20, 4).unwrap();
        let a = book.nearest(&[0.0, 0.0]);
        let b = book.nearest(&[10.0, 0.0]);
        let c = book.nearest(&[0.0, 10.0]);
        assert!(a != b && b != c && a != c);
    }

    #[test]
    fn pretraining_beats_chance_and_freezes() {
        use crate::dsp::FrameParams;
        use crate::room::synth::speech_like;
        let stft = Arc::new(Stft::new(FrameParams::new(16_000, 64, 64).unwrap()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clean: Vec<Vec<f64>> = (0..4).map(|_| speech_like(&mut rng, 8000, 16_000)).collect();
        let cfg = PretrainConfig {
            tdnn: TdnnConfig {
                num_blocks: 2,
                hidden: 24,
                bottleneck: 8,
                num_classes: 8,
                ..TdnnConfig::desk(33)
            },
            max_epochs: 30,
            adam: AdamConfig {
                lr: 3e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let (am, book, report) = pretrain_am(&clean, &stft, &cfg).unwrap();
        assert!(am.is_frozen());
        assert_eq!((book.num_classes(), book.dim()), (8, 33));
        // chance is at most the largest class share; require well above 1/8
        assert!(report.final_accuracy > 0.5, "{report:?}");
        assert!(report.history.last().unwrap().0 < report.history[0].0);
    }
}
