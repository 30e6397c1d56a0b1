//! The toolkit configuration file: one TOML document, every section
//! optional, unknown keys rejected.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use mcse_core::am::{PretrainConfig, TdnnConfig};
use mcse_core::dsp::FrameParams;
use mcse_core::model::ModelConfig;
use mcse_core::room::dataset::DatasetRecipe;
use mcse_core::tcn::TcnConfig;
use mcse_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UserError;

/// File name of the resolved configuration written next to outputs.
pub const ECHO_FILE: &str = "config.resolved.toml";

/// Starting point the file and flags are layered on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size published setup: 20 ms / 10 ms framing, 257 bins,
    /// B=128, H=512, X=8, R=3 TCN, 1536-wide TDNN with 3920 classes.
    Paper,
    /// CPU-sized: 4 ms window, 2 ms hop, 33 bins; small TCN and TDNN.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToolkitConfig {
    /// Variant, framing, array geometry, frontend and TCN.
    pub model: ModelConfig,
    /// Acoustic-model pretraining (codebook + TDNN).
    pub am: PretrainConfig,
    /// Optimizer, loss weights, BMUF, data and output paths.
    pub train: TrainConfig,
    /// Simulation recipe. Its sample rate and geometry must match the model.
    pub dataset: DatasetRecipe,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper)
    }
}

/// The frame configuration of the desk preset.
pub fn desk_frame() -> FrameParams {
    FrameParams::new(16_000, 64, 64).expect("valid desk framing")
}

impl ToolkitConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => ToolkitConfig {
                model: ModelConfig {
                    tcn: TcnConfig::paper(),
                    ..Default::default()
                },
                am: PretrainConfig {
                    tdnn: TdnnConfig::paper(),
                    ..Default::default()
                },
                train: TrainConfig::default(),
                dataset: DatasetRecipe::default(),
            },
            Preset::Desk => {
                let frame = desk_frame();
                ToolkitConfig {
                    model: ModelConfig::desk(mcse_core::frontend::Variant::Proposed, frame),
                    am: PretrainConfig {
                        tdnn: TdnnConfig::desk(frame.bins()),
                        ..Default::default()
                    },
                    train: TrainConfig::default(),
                    dataset: DatasetRecipe {
                        train_seconds: 2.0,
                        ..Default::default()
                    },
                }
            }
        }
    }

    /// Preset overlaid with the tables present in `path`.
    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Self> {
        let base = Self::preset(preset);
        let Some(path) = path else { return Ok(base) };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let overlay: toml::Table = text
            .parse()
            .map_err(|e| UserError(format!("config {}: {e}", path.display())))?;
        let mut merged = toml::Table::try_from(&base)?;
        merge(&mut merged, overlay);
        let cfg: ToolkitConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| UserError(format!("config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Cross-section consistency; individual sections validate themselves
    /// where they are used.
    pub fn validate(&self) -> Result<()> {
        if self.dataset.sample_rate != self.model.frame.sample_rate {
            return Err(UserError(format!(
                "dataset.sample_rate {} differs from model.frame.sample_rate {}",
                self.dataset.sample_rate, self.model.frame.sample_rate
            ))
            .into());
        }
        if self.dataset.geometry != self.model.geometry {
            return Err(UserError("dataset.geometry differs from model.geometry".into()).into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(ECHO_FILE), self.to_toml()?)?;
        Ok(())
    }
}

/// Recursive table merge: keys of `over` replace those of `base`, except
/// that tables are merged key by key. Keys absent from `base` are kept so
/// deserialization can reject them.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for p in [Preset::Paper, Preset::Desk] {
            let c = ToolkitConfig::preset(p);
            let back: ToolkitConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c);
            c.validate().unwrap();
        }
    }

    #[test]
    fn overlay_keeps_unset_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[train]\nepochs = 3\n[train.adam]\nlr = 0.01\n").unwrap();
        let c = ToolkitConfig::load(Preset::Desk, Some(&p)).unwrap();
        let base = ToolkitConfig::preset(Preset::Desk);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.adam.lr, 0.01);
        assert_eq!(c.train.adam.weight_decay, base.train.adam.weight_decay);
        assert_eq!(c.model, base.model);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[train]\nepochz = 3\n").unwrap();
        let e = ToolkitConfig::load(Preset::Desk, Some(&p)).unwrap_err();
        assert!(e.to_string().contains("epochz"), "{e}");
    }
}
