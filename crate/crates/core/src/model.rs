//! The full enhancement chain: frontend → TCN → complex mask on the
//! reference channel → inverse STFT.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{FrameParams, Stft, Waveform};
use crate::error::{invalid, Error, Result};
use crate::frontend::{FeatureExtractor, FixedFeatures, Frontend, FrontendConfig, Variant};
use crate::nn::layers::Mode;
use crate::nn::{ops, Checkpoint, Graph, ParamStore, Precision, Tensor, Var};
use crate::spatial::ArrayGeometry;
use crate::tcn::{Tcn, TcnConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub frame: FrameParams,
    pub geometry: ArrayGeometry,
    pub frontend: FrontendConfig,
    pub tcn: TcnConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Proposed,
            frame: FrameParams::paper(),
            geometry: ArrayGeometry::default(),
            frontend: FrontendConfig::default(),
            tcn: TcnConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale model for a given frame configuration.
    pub fn desk(variant: Variant, frame: FrameParams) -> Self {
        ModelConfig {
            variant,
            frame,
            geometry: ArrayGeometry::default(),
            frontend: FrontendConfig {
                filters: frame.bins(),
                ..Default::default()
            },
            tcn: TcnConfig::desk(0, frame.bins()),
        }
    }
}

/// Output of a forward pass over a batch.
pub struct ForwardOutput {
    /// `[B, 2F, T]`
    pub mask: Var,
    /// Enhanced spectrum planes `[B, 2F, T]`.
    pub spectrum: Var,
    /// Enhanced waveforms `[B, N]`.
    pub wave: Var,
    pub intermediates: Vec<(String, Var)>,
}

#[derive(Clone, Debug)]
pub struct EnhancementModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub frontend: Frontend,
    pub tcn: Tcn,
    pub extractor: FeatureExtractor,
}

impl EnhancementModel {
    /// Builds a freshly initialized model. `config.tcn.input_dim` and `bins`
    /// are derived from the frontend.
    pub fn new(config: &ModelConfig, precision: Precision, seed: u64) -> Result<Self> {
        let mut config = config.clone();
        config.frame.validate()?;
        config.geometry.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(Precision::F64);
        let frontend = Frontend::build(&mut store, config.variant, &config.frontend, &config.frame, &mut rng)?;
        config.tcn.input_dim = frontend.output_dim;
        config.tcn.bins = config.frame.bins();
        let tcn = Tcn::build(&mut store, &config.tcn, &mut rng)?;
        store.set_precision(precision);
        let extractor = FeatureExtractor::new(&config.frame, &config.geometry, &config.frontend)?;
        Ok(EnhancementModel {
            config,
            store,
            frontend,
            tcn,
            extractor,
        })
    }

    pub fn stft(&self) -> &Arc<Stft> {
        &self.extractor.stft
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Stacks equal-length multi-channel waveforms into `[B, C, N]`.
    pub fn batch(&self, waves: &[&Waveform]) -> Result<Tensor> {
        let first = waves.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (c, n) = (first.num_channels(), first.len());
        if c != self.config.frontend.channels {
            return invalid(format!(
                "model expects {} channels, input has {c}",
                self.config.frontend.channels
            ));
        }
        let mut data = Vec::with_capacity(waves.len() * c * n);
        for w in waves {
            if w.num_channels() != c || w.len() != n {
                return invalid("batch items must share channel count and length");
            }
            if w.sample_rate() != self.config.frame.sample_rate {
                return invalid(format!(
                    "input is {} Hz, model runs at {} Hz",
                    w.sample_rate(),
                    self.config.frame.sample_rate
                ));
            }
            for ch in w.channels() {
                data.extend_from_slice(ch);
            }
        }
        Tensor::new(&[waves.len(), c, n], data)
    }

    pub fn features(&self, waves: &Tensor) -> Result<FixedFeatures> {
        self.extractor.extract(waves)
    }

    /// Full differentiable chain for `[B, C, N]`.
    pub fn forward(&self, g: &mut Graph, waves: &Tensor, fixed: &FixedFeatures, mode: Mode) -> Result<ForwardOutput> {
        self.forward_with(g, &self.store, waves, fixed, mode)
    }

    /// Like [`forward`](Self::forward) but reading parameters from `store`,
    /// which must share this model's layout (a replica or a perturbed copy).
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, waves: &Tensor, fixed: &FixedFeatures, mode: Mode) -> Result<ForwardOutput> {
        let fe = self.frontend.forward(g, store, waves, fixed, mode)?;
        let mask = self.tcn.forward(g, store, fe.features)?;
        self.finish(g, waves.shape()[2], mask, fixed, fe.intermediates)
    }

    fn finish(&self, g: &mut Graph, len: usize, mask: Var, fixed: &FixedFeatures, intermediates: Vec<(String, Var)>) -> Result<ForwardOutput> {
        let ch1 = g.constant(fixed.ch1.clone());
        let spectrum = ops::complex_mask(g, mask, ch1)?;
        let wave = ops::istft(g, spectrum, self.stft(), len)?;
        Ok(ForwardOutput {
            mask,
            spectrum,
            wave,
            intermediates,
        })
    }

    /// Enhances one utterance (inference: batch norm uses running statistics).
    pub fn enhance(&self, input: &Waveform) -> Result<Vec<f64>> {
        let x = self.batch(&[input])?;
        let fixed = self.features(&x)?;
        self.enhance_batch(&x, &fixed)
    }

    /// Inference over `[B, C, N]` with precomputed features; returns the
    /// item-major `[B, N]` samples.
    pub fn enhance_batch(&self, x: &Tensor, fixed: &FixedFeatures) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, x, fixed, Mode::Eval)?;
        Ok(g.value(out.wave).data().to_vec())
    }

    /// Enhances with the mask replaced by `1 + 0j`, bypassing the network.
    pub fn enhance_unit_mask(&self, input: &Waveform) -> Result<Vec<f64>> {
        let x = self.batch(&[input])?;
        let fixed = self.features(&x)?;
        let mut g = Graph::new();
        let s = fixed.ch1.shape().to_vec();
        let f = s[1] / 2;
        let ones = (0..s[1] * s[2]).map(|i| if i / s[2] < f { 1.0 } else { 0.0 }).collect();
        let mask = g.constant(Tensor::new(&s, ones)?);
        let out = self.finish(&mut g, input.len(), mask, &fixed, Vec::new())?;
        Ok(g.value(out.wave).data().to_vec())
    }

    /// Enhances and also returns the mask planes `[2F, T]`.
    pub fn enhance_with_mask(&self, input: &Waveform) -> Result<(Vec<f64>, Tensor)> {
        let x = self.batch(&[input])?;
        let fixed = self.features(&x)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &x, &fixed, Mode::Eval)?;
        let m = g.value(out.mask).clone();
        let s = m.shape().to_vec();
        Ok((g.value(out.wave).data().to_vec(), m.reshape(&[s[1], s[2]])?))
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": "enhancement_model",
            "config": self.config,
            "precision": self.store.precision(),
            "extra": extra,
        }));
        c.extend(self.store.named_values());
        c
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn from_checkpoint(c: &Checkpoint, path: &Path) -> Result<Self> {
        if c.metadata.get("kind").and_then(|k| k.as_str()) != Some("enhancement_model") {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "not an enhancement-model checkpoint".into(),
            });
        }
        let cfg: ModelConfig = serde_json::from_value(c.metadata["config"].clone())?;
        let precision: Precision = serde_json::from_value(c.metadata["precision"].clone())?;
        let mut m = EnhancementModel::new(&cfg, precision, 0)?;
        let own: Vec<_> = c.tensors.iter().filter(|(n, _)| m.store.find(n).is_some()).cloned().collect();
        m.store.load_named(&own)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}
