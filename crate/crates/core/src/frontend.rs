//! Two-stage 2-D convolutional time-frequency feature fusion.
//!
//! Time branch: a multi-channel convolution sum (one learned filter bank
//! applied across all microphones) and inter-channel convolution differences
//! (a shared filter bank applied to microphone pairs, realized as one
//! height-dilated 2-D convolution). Frequency branch: log-power spectra of
//! every microphone and of fixed superdirective beams. Each branch goes
//! through a conv → ReLU → batch-norm fusion layer, and a third fusion layer
//! merges the two.
//!
//! Feature maps are `[B, panels, height, frames]`; the time axis is the last
//! one and is padded causally, the height axis is never padded.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{lps as lps_of, FrameParams, Stft, LPS_FLOOR};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::layers::{BatchNorm, Conv2d, Mode, Pointwise};
use crate::nn::ops::{self, Conv2dSpec};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::spatial::{ipd, sdbf_apply, sdbf_weights, ArrayGeometry, BeamformerWeights};

/// Model variants: the proposed system and its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Real/imaginary ch1 spectrum and IPDs, projected by a 1-D convolution.
    #[serde(rename = "B1-features")]
    B1Features,
    /// LPS, IPD, MCS and ICD stacked along frequency, 1-D convolution.
    B2,
    /// Single-channel LPS and IPDs stacked along frequency, 1-D convolution.
    M1,
    /// Single-channel LPS and IPD panels through one fusion Conv2D.
    M2,
    /// Multi-channel LPS panels through one fusion Conv2D.
    M3,
    /// Multi-channel and beamformed LPS panels through one fusion Conv2D.
    M4,
    /// Full two-stage fusion.
    M5,
    /// Full two-stage fusion trained with the auxiliary acoustic model.
    Proposed,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::B1Features,
        Variant::B2,
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::M5,
        Variant::Proposed,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::B1Features => "B1-features",
            Variant::B2 => "B2",
            Variant::M1 => "M1",
            Variant::M2 => "M2",
            Variant::M3 => "M3",
            Variant::M4 => "M4",
            Variant::M5 => "M5",
            Variant::Proposed => "Proposed",
        }
    }

    /// Whether the variant is trained with the acoustic-model loss.
    pub fn uses_am(self) -> bool {
        self == Variant::Proposed
    }

    pub fn valid_ids() -> String {
        Self::ALL.iter().map(|v| v.id()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variant '{s}'; valid ids: {}",
                    Self::valid_ids()
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionLayerConfig {
    pub in_panels: usize,
    pub out_panels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
}

impl FusionLayerConfig {
    pub fn output_height(&self, height: usize) -> Result<usize> {
        let spec = Conv2dSpec::causal(self.kernel[1], (self.stride[0], self.stride[1]), (1, 1));
        Ok(spec.output_hw((height, 1), (self.kernel[0], self.kernel[1]))?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub channels: usize,
    /// Filters per time-domain layer; must equal the STFT bin count when the
    /// time and frequency branches are fused.
    pub filters: usize,
    /// 1-based microphone pairs for the convolution differences and IPDs.
    pub icd_pairs: Vec<[usize; 2]>,
    pub icd_dilation: usize,
    /// Shared filter bank with element-wise pair weights; `false` learns
    /// both kernel rows freely.
    pub icd_factorized: bool,
    pub sdbf_directions: usize,
    /// 1-based microphones used by the beamformer.
    pub sdbf_mics: Vec<usize>,
    pub sdbf_loading: f64,
    pub fusion1: FusionLayerConfig,
    pub fusion2: FusionLayerConfig,
    pub fusion3: FusionLayerConfig,
    pub fusion_bias: bool,
    /// Output width of the 1-D projection used by the B1/B2/M1 variants.
    pub projection_dim: usize,
    pub lps_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            channels: 8,
            filters: 257,
            icd_pairs: vec![[1, 5], [2, 6], [3, 7], [4, 8]],
            icd_dilation: 4,
            icd_factorized: true,
            sdbf_directions: 7,
            sdbf_mics: vec![1, 2],
            sdbf_loading: 1e-3,
            fusion1: FusionLayerConfig {
                in_panels: 5,
                out_panels: 8,
                kernel: [5, 3],
                stride: [2, 1],
            },
            fusion2: FusionLayerConfig {
                in_panels: 15,
                out_panels: 8,
                kernel: [5, 3],
                stride: [2, 1],
            },
            fusion3: FusionLayerConfig {
                in_panels: 16,
                out_panels: 8,
                kernel: [3, 3],
                stride: [1, 1],
            },
            fusion_bias: true,
            projection_dim: 256,
            lps_floor: LPS_FLOOR,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self, frame: &FrameParams) -> Result<()> {
        if self.channels == 0 {
            return invalid("frontend needs at least one channel");
        }
        for &[a, b] in &self.icd_pairs {
            if a == 0 || b == 0 || a > self.channels || b > self.channels {
                return invalid(format!("pair ({a}, {b}) out of range for {} channels", self.channels));
            }
            if b != a + self.icd_dilation {
                return invalid(format!(
                    "pair ({a}, {b}) is not {} channels apart as the dilation requires",
                    self.icd_dilation
                ));
            }
        }
        if self.sdbf_mics.iter().any(|&m| m == 0 || m > self.channels) {
            return invalid("beamformer microphone index out of range");
        }
        if self.filters != frame.bins() {
            return invalid(format!(
                "time-domain filter count {} must equal the STFT bin count {}",
                self.filters,
                frame.bins()
            ));
        }
        Ok(())
    }

    /// Look directions `i * pi / (D + 1)`, `i = 1..=D`.
    pub fn directions(&self) -> Vec<f64> {
        let d = self.sdbf_directions;
        (1..=d).map(|i| i as f64 * std::f64::consts::PI / (d + 1) as f64).collect()
    }
}

/// Non-learnable features of a batch, computed once per example.
#[derive(Clone, Debug)]
pub struct FixedFeatures {
    /// `[B, C, F, T]`
    pub lps: Tensor,
    /// `[B, D, F, T]`
    pub sdbf_lps: Tensor,
    /// `[B, P, F, T]`
    pub ipd: Tensor,
    /// Reference-channel spectrum planes `[B, 2F, T]`.
    pub ch1: Tensor,
}

/// STFT plan and beamformer weights shared by all examples.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub stft: Arc<Stft>,
    beams: Vec<BeamformerWeights>,
    sdbf_mics: Vec<usize>,
    pairs: Vec<[usize; 2]>,
    channels: usize,
    floor: f64,
}

impl FeatureExtractor {
    pub fn new(frame: &FrameParams, geometry: &ArrayGeometry, cfg: &FrontendConfig) -> Result<Self> {
        if geometry.num_mics() != cfg.channels {
            return invalid(format!(
                "array has {} microphones, frontend expects {}",
                geometry.num_mics(),
                cfg.channels
            ));
        }
        let subset: Vec<usize> = cfg.sdbf_mics.iter().map(|m| m - 1).collect();
        let beams = cfg
            .directions()
            .into_iter()
            .map(|theta| sdbf_weights(geometry, theta, frame, cfg.sdbf_loading, &subset))
            .collect::<Result<_>>()?;
        Ok(FeatureExtractor {
            stft: Arc::new(Stft::new(*frame)?),
            beams,
            sdbf_mics: subset,
            pairs: cfg.icd_pairs.clone(),
            channels: cfg.channels,
            floor: cfg.lps_floor,
        })
    }

    pub fn beams(&self) -> &[BeamformerWeights] {
        &self.beams
    }

    /// Features of a batch of equal-length multi-channel waveforms `[B, C, N]`.
    pub fn extract(&self, waves: &Tensor) -> Result<FixedFeatures> {
        let s = waves.shape();
        if s.len() != 3 || s[1] != self.channels {
            return shape_err(format!(
                "expected [batch, {} channels, samples], got {s:?}",
                self.channels
            ));
        }
        let (b, c, n) = (s[0], s[1], s[2]);
        let p = self.stft.params();
        let (f, t) = (p.bins(), p.num_frames(n)?);
        let (d, np) = (self.beams.len(), self.pairs.len());
        let mut lps = Vec::with_capacity(b * c * f * t);
        let mut sdbf = Vec::with_capacity(b * d * f * t);
        let mut ipds = Vec::with_capacity(b * np * f * t);
        let mut ch1 = Vec::with_capacity(b * 2 * f * t);
        for bi in 0..b {
            let specs = (0..c)
                .map(|ci| self.stft.forward(&waves.data()[(bi * c + ci) * n..(bi * c + ci + 1) * n]))
                .collect::<Result<Vec<_>>>()?;
            for sp in &specs {
                lps.extend(lps_of(sp, self.floor)?.into_data());
            }
            let sub: Vec<_> = self.sdbf_mics.iter().map(|&m| &specs[m]).collect();
            for w in &self.beams {
                sdbf.extend(lps_of(&sdbf_apply(w, &sub)?, self.floor)?.into_data());
            }
            for &[a, bb] in &self.pairs {
                ipds.extend(ipd(&specs[a - 1], &specs[bb - 1])?.into_data());
            }
            ch1.extend(specs[0].to_planes());
        }
        Ok(FixedFeatures {
            lps: Tensor::new(&[b, c, f, t], lps)?,
            sdbf_lps: Tensor::new(&[b, d, f, t], sdbf)?,
            ipd: Tensor::new(&[b, np, f, t], ipds)?,
            ch1: Tensor::new(&[b, 2 * f, t], ch1)?,
        })
    }
}

/// One conv → ReLU → batch-norm fusion layer.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub config: FusionLayerConfig,
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl FusionLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: FusionLayerConfig, bias: bool, rng: &mut impl Rng) -> Self {
        let spec = Conv2dSpec::causal(cfg.kernel[1], (cfg.stride[0], cfg.stride[1]), (1, 1));
        FusionLayer {
            config: cfg,
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                cfg.in_panels,
                cfg.out_panels,
                (cfg.kernel[0], cfg.kernel[1]),
                spec,
                bias,
                rng,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cfg.out_panels),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = ops::relu(g, y);
        self.bn.forward(g, store, y, mode)
    }
}

#[derive(Clone, Debug)]
pub enum IcdParams {
    /// Shared filters `k: [N, L]`, frozen `w1: [L]`, learnable `w2: [L]`.
    Factorized { filters: ParamId, w1: ParamId, w2: ParamId },
    /// Unconstrained kernel `[N, 1, 2, L]`.
    Free(ParamId),
}

/// Output of [`Frontend::forward`].
pub struct FrontendOutput {
    /// `[B, D, T]`.
    pub features: Var,
    pub flattened_dim: usize,
    /// Named intermediate feature maps.
    pub intermediates: Vec<(String, Var)>,
}

#[derive(Clone, Debug)]
pub struct Frontend {
    pub variant: Variant,
    pub config: FrontendConfig,
    pub frame: FrameParams,
    pub mcs: Option<ParamId>,
    pub icd: Option<IcdParams>,
    pub fusion_time: Option<FusionLayer>,
    pub fusion_freq: Option<FusionLayer>,
    pub fusion_merge: Option<FusionLayer>,
    pub projection: Option<Pointwise>,
    pub output_dim: usize,
}

fn uses_time_branch(v: Variant) -> bool {
    matches!(v, Variant::B2 | Variant::M5 | Variant::Proposed)
}

impl Frontend {
    /// Builds the parameters of `variant` into `store`.
    pub fn build(store: &mut ParamStore, variant: Variant, cfg: &FrontendConfig, frame: &FrameParams, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(frame)?;
        let (c, n, l, f) = (cfg.channels, cfg.filters, frame.win_len, frame.bins());
        let np = cfg.icd_pairs.len();
        let mut fe = Frontend {
            variant,
            config: cfg.clone(),
            frame: *frame,
            mcs: None,
            icd: None,
            fusion_time: None,
            fusion_freq: None,
            fusion_merge: None,
            projection: None,
            output_dim: 0,
        };
        if uses_time_branch(variant) {
            fe.mcs = Some(store.add_kaiming("frontend.mcs.weight", &[n, 1, c, l], c * l, rng));
            fe.icd = Some(if cfg.icd_factorized {
                IcdParams::Factorized {
                    filters: store.add_kaiming("frontend.icd.filters", &[n, l], l, rng),
                    w1: store.add_frozen("frontend.icd.w1", Tensor::full(&[l], 1.0)),
                    w2: store.add("frontend.icd.w2", Tensor::full(&[l], 1.0)),
                }
            } else {
                IcdParams::Free(store.add_kaiming("frontend.icd.weight", &[n, 1, 2, l], 2 * l, rng))
            });
        }
        let single = |panels: usize| FusionLayerConfig {
            in_panels: panels,
            ..cfg.fusion1
        };
        match variant {
            Variant::M5 | Variant::Proposed => {
                let (f1, f2, f3) = (cfg.fusion1, cfg.fusion2, cfg.fusion3);
                if f1.in_panels != 1 + np {
                    return invalid(format!("fusion1 expects {} panels, MCS + ICD give {}", f1.in_panels, 1 + np));
                }
                if f2.in_panels != c + cfg.sdbf_directions {
                    return invalid(format!(
                        "fusion2 expects {} panels, LPS + beams give {}",
                        f2.in_panels,
                        c + cfg.sdbf_directions
                    ));
                }
                if f3.in_panels != f1.out_panels + f2.out_panels {
                    return invalid("fusion3 input panels must equal the sum of the stage-1 outputs");
                }
                let (h1, h2) = (f1.output_height(n)?, f2.output_height(f)?);
                if h1 != h2 {
                    return invalid(format!("stage-1 heights differ: {h1} vs {h2}"));
                }
                fe.fusion_time = Some(FusionLayer::new(store, "frontend.fusion1", f1, cfg.fusion_bias, rng));
                fe.fusion_freq = Some(FusionLayer::new(store, "frontend.fusion2", f2, cfg.fusion_bias, rng));
                fe.fusion_merge = Some(FusionLayer::new(store, "frontend.fusion3", f3, cfg.fusion_bias, rng));
                fe.output_dim = f3.out_panels * f3.output_height(h1)?;
            }
            Variant::M2 | Variant::M3 | Variant::M4 => {
                let lc = match variant {
                    Variant::M2 => single(1 + np),
                    Variant::M3 => single(c),
                    _ => cfg.fusion2,
                };
                if variant == Variant::M4 && lc.in_panels != c + cfg.sdbf_directions {
                    return invalid("fusion2 panel count does not match LPS + beams");
                }
                fe.output_dim = lc.out_panels * lc.output_height(f)?;
                fe.fusion_freq = Some(FusionLayer::new(store, "frontend.fusion", lc, cfg.fusion_bias, rng));
            }
            Variant::M1 | Variant::B1Features | Variant::B2 => {
                let input = match variant {
                    Variant::M1 => (1 + np) * f,
                    Variant::B1Features => (2 + np) * f,
                    _ => (1 + np) * f + (1 + np) * n,
                };
                fe.projection = Some(Pointwise::new(store, "frontend.proj", input, cfg.projection_dim, true, rng));
                fe.output_dim = cfg.projection_dim;
            }
        }
        Ok(fe)
    }

    /// Multi-channel convolution sum of `waves: [B, C, N]` → `[B, 1, N_f, T]`.
    pub fn mcs(&self, g: &mut Graph, store: &ParamStore, waves: Var) -> Result<Var> {
        let id = self
            .mcs
            .ok_or_else(|| Error::InvalidArgument(format!("variant {} has no time branch", self.variant)))?;
        let s = g.shape(waves).to_vec();
        let x = ops::reshape(g, waves, &[s[0], 1, s[1], s[2]])?;
        let w = g.param(store, id);
        let spec = Conv2dSpec {
            stride: (1, self.frame.hop),
            ..Default::default()
        };
        let y = ops::conv2d(g, x, w, None, spec)?;
        let ys = g.shape(y).to_vec();
        ops::reshape(g, y, &[ys[0], 1, ys[1], ys[3]])
    }

    /// Inter-channel convolution differences → `[B, pairs, N_f, T]`.
    pub fn icd(&self, g: &mut Graph, store: &ParamStore, waves: Var) -> Result<Var> {
        let params = self
            .icd
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("variant {} has no time branch", self.variant)))?;
        let kernel = match params {
            IcdParams::Factorized { filters, w1, w2 } => {
                let k = g.param(store, *filters);
                let a = g.param(store, *w1);
                let b = g.param(store, *w2);
                ops::icd_kernel(g, k, a, b)?
            }
            IcdParams::Free(id) => g.param(store, *id),
        };
        let s = g.shape(waves).to_vec();
        let x = ops::reshape(g, waves, &[s[0], 1, s[1], s[2]])?;
        let spec = Conv2dSpec {
            stride: (1, self.frame.hop),
            dilation: (self.config.icd_dilation, 1),
            ..Default::default()
        };
        // kernel rows land on channels h and h + dilation for every h
        let y = ops::conv2d(g, x, kernel, None, spec)?;
        let rows: Vec<usize> = self.config.icd_pairs.iter().map(|p| p[0] - 1).collect();
        let y = ops::gather(g, y, 2, &rows)?;
        ops::swap_axes(g, y, 1)
    }

    /// Runs the variant's frontend on raw waveforms `[B, C, N]` plus their
    /// fixed features.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, waves: &Tensor, fixed: &FixedFeatures, mode: Mode) -> Result<FrontendOutput> {
        let mut inter = Vec::new();
        let wv = g.constant(waves.clone());
        let b = waves.shape()[0];
        let t = fixed.ch1.shape()[2];
        let f = self.frame.bins();
        let lps = g.constant(fixed.lps.clone());
        let ipd = g.constant(fixed.ipd.clone());
        let ch1_lps = ops::gather(g, lps, 1, &[0])?;
        let features = match self.variant {
            Variant::M5 | Variant::Proposed => {
                let mcs = self.mcs(g, store, wv)?;
                let icd = self.icd(g, store, wv)?;
                inter.push(("mcs".into(), mcs));
                inter.push(("icd".into(), icd));
                let time_in = ops::concat(g, &[mcs, icd], 1)?;
                let sd = g.constant(fixed.sdbf_lps.clone());
                inter.push(("lps".into(), lps));
                inter.push(("sdbf_lps".into(), sd));
                let freq_in = ops::concat(g, &[lps, sd], 1)?;
                let a = self.fusion_time.as_ref().unwrap().forward(g, store, time_in, mode)?;
                let bq = self.fusion_freq.as_ref().unwrap().forward(g, store, freq_in, mode)?;
                inter.push(("fusion1".into(), a));
                inter.push(("fusion2".into(), bq));
                let merged = ops::concat(g, &[a, bq], 1)?;
                let y = self.fusion_merge.as_ref().unwrap().forward(g, store, merged, mode)?;
                inter.push(("fusion3".into(), y));
                y
            }
            Variant::M2 | Variant::M3 | Variant::M4 => {
                let input = match self.variant {
                    Variant::M2 => ops::concat(g, &[ch1_lps, ipd], 1)?,
                    Variant::M3 => lps,
                    _ => {
                        let sd = g.constant(fixed.sdbf_lps.clone());
                        ops::concat(g, &[lps, sd], 1)?
                    }
                };
                inter.push(("input".into(), input));
                let y = self.fusion_freq.as_ref().unwrap().forward(g, store, input, mode)?;
                inter.push(("fusion".into(), y));
                y
            }
            Variant::M1 | Variant::B1Features | Variant::B2 => {
                let mut parts = Vec::new();
                match self.variant {
                    Variant::B1Features => {
                        let planes = g.constant(fixed.ch1.clone().reshape(&[b, 1, 2 * f, t])?);
                        parts.push(planes);
                        parts.push(ipd);
                    }
                    _ => {
                        parts.push(ch1_lps);
                        parts.push(ipd);
                    }
                }
                if self.variant == Variant::B2 {
                    let mcs = self.mcs(g, store, wv)?;
                    let icd = self.icd(g, store, wv)?;
                    parts.push(mcs);
                    parts.push(icd);
                }
                // panels are stacked along frequency: [B, P, H, T] -> [B, P*H, T]
                let mut flat = Vec::new();
                for p in parts {
                    let s = g.shape(p).to_vec();
                    flat.push(ops::reshape(g, p, &[s[0], s[1] * s[2], s[3]])?);
                }
                let x = ops::concat(g, &flat, 1)?;
                inter.push(("stack".into(), x));
                let y = self.projection.as_ref().unwrap().forward(g, store, x)?;
                inter.push(("projection".into(), y));
                y
            }
        };
        let s = g.shape(features).to_vec();
        let features = if s.len() == 4 {
            // panel-major flattening
            ops::reshape(g, features, &[s[0], s[1] * s[2], s[3]])?
        } else {
            features
        };
        let d = g.shape(features)[1];
        if d != self.output_dim {
            return shape_err(format!("frontend produced {d} features, expected {}", self.output_dim));
        }
        Ok(FrontendOutput {
            features,
            flattened_dim: d,
            intermediates: inter,
        })
    }
}

/// Expected `(panels, height)` after each fusion stage for the full-size
/// M5 configuration.
pub fn shape_table(variant: Variant, cfg: &FrontendConfig, frame: &FrameParams) -> Result<Vec<(String, usize, usize)>> {
    let f = frame.bins();
    let np = cfg.icd_pairs.len();
    let mut rows = Vec::new();
    match variant {
        Variant::M5 | Variant::Proposed => {
            let h1 = cfg.fusion1.output_height(cfg.filters)?;
            let h2 = cfg.fusion2.output_height(f)?;
            rows.push(("fusion1".into(), cfg.fusion1.out_panels, h1));
            rows.push(("fusion2".into(), cfg.fusion2.out_panels, h2));
            rows.push(("fusion3".into(), cfg.fusion3.out_panels, cfg.fusion3.output_height(h1)?));
        }
        Variant::M2 | Variant::M3 | Variant::M4 => {
            let lc = if variant == Variant::M4 { cfg.fusion2 } else { cfg.fusion1 };
            let _ = np;
            rows.push(("fusion".into(), lc.out_panels, lc.output_height(f)?));
        }
        _ => rows.push(("projection".into(), 1, cfg.projection_dim)),
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (FrameParams, FrontendConfig, ArrayGeometry) {
        let frame = FrameParams::new(16_000, 32, 32).unwrap();
        let cfg = FrontendConfig {
            filters: frame.bins(),
            projection_dim: 12,
            ..Default::default()
        };
        let geom = ArrayGeometry::linear(&[0.02, 0.04, 0.06, 0.06, 0.06, 0.04, 0.02]).unwrap();
        (frame, cfg, geom)
    }

    fn waves(b: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[b, 8, n], (0..b * 8 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn variant_ids_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.id().parse::<Variant>().unwrap(), v);
        }
        let err = "M9".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("Proposed"), "{err}");
    }

    #[test]
    fn paper_shape_table() {
        let rows = shape_table(Variant::M5, &FrontendConfig::default(), &FrameParams::paper()).unwrap();
        let dims: Vec<_> = rows.iter().map(|r| (r.1, r.2)).collect();
        assert_eq!(dims, vec![(8, 127), (8, 127), (8, 125)]);
    }

    #[test]
    fn icd_matches_per_pair_convolution() {
        let (frame, cfg, _) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(Precision::F64);
        let fe = Frontend::build(&mut store, Variant::M5, &cfg, &frame, &mut rng).unwrap();
        let IcdParams::Factorized { filters, w2, .. } = fe.icd.clone().unwrap() else { panic!() };
        // non-trivial pair weights
        let l = frame.win_len;
        store.set_value(w2, Tensor::new(&[l], (0..l).map(|i| 0.5 + i as f64 / l as f64).collect()).unwrap()).unwrap();
        let x = waves(2, 200, 4);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = fe.icd(&mut g, &store, xv).unwrap();
        let out = g.value(y).clone();
        let t = frame.num_frames(200).unwrap();
        assert_eq!(out.shape(), &[2, 4, cfg.filters, t]);
        let k = store.value(filters).clone();
        let w2v = store.value(w2).clone();
        let mut worst = 0.0f64;
        for b in 0..2 {
            for (p, &[m1, m2]) in cfg.icd_pairs.iter().enumerate() {
                for n in 0..cfg.filters {
                    for tt in 0..t {
                        let mut acc = 0.0;
                        for i in 0..l {
                            let kv = k.data()[n * l + i];
                            let s = tt * frame.hop + i;
                            acc += kv * x.data()[(b * 8 + m1 - 1) * 200 + s];
                            acc -= w2v.data()[i] * kv * x.data()[(b * 8 + m2 - 1) * 200 + s];
                        }
                        let got = out.data()[((b * 4 + p) * cfg.filters + n) * t + tt];
                        worst = worst.max((got - acc).abs());
                    }
                }
            }
        }
        assert!(worst < 1e-12, "max deviation {worst}");
    }

    #[test]
    fn mcs_sums_channel_convolutions() {
        let (frame, cfg, _) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new(Precision::F64);
        let fe = Frontend::build(&mut store, Variant::M5, &cfg, &frame, &mut rng).unwrap();
        let x = waves(1, 100, 6);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = fe.mcs(&mut g, &store, xv).unwrap();
        let out = g.value(y).clone();
        let t = frame.num_frames(100).unwrap();
        let w = store.value(fe.mcs.unwrap()).clone();
        let l = frame.win_len;
        for n in [0, 7, 16] {
            for tt in 0..t {
                let mut acc = 0.0;
                for c in 0..8 {
                    for i in 0..l {
                        acc += w.data()[(n * 8 + c) * l + i] * x.data()[c * 100 + tt * frame.hop + i];
                    }
                }
                assert!((out.data()[n * t + tt] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_variant_builds_and_runs() {
        let (frame, cfg, geom) = small();
        let ex = FeatureExtractor::new(&frame, &geom, &cfg).unwrap();
        let x = waves(2, 160, 7);
        let fixed = ex.extract(&x).unwrap();
        let t = frame.num_frames(160).unwrap();
        for v in Variant::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut store = ParamStore::new(Precision::F64);
            let fe = Frontend::build(&mut store, v, &cfg, &frame, &mut rng).unwrap();
            let mut g = Graph::new();
            let out = fe.forward(&mut g, &store, &x, &fixed, Mode::Train).unwrap();
            assert_eq!(g.shape(out.features), &[2, fe.output_dim, t], "{v}");
            assert!(g.value(out.features).all_finite());
        }
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        let (frame, mut cfg, _) = small();
        cfg.icd_pairs[0] = [1, 4];
        assert!(cfg.validate(&frame).is_err());
    }
}
