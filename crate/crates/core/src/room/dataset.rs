//! On-disk corpora: `<root>/{mix,target}/<id>.wav`, `recipe.json` and a
//! line-delimited `manifest.jsonl` with per-example seeds and file hashes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::augment::{augment, AugmentConfig, AugmentKind};
use super::scene::{draw_scene, simulate_example, SceneConfig, TrainingExample};
use super::synth::{colored_noise, speech_like};
use super::{resample, RoomClass};
use crate::dsp::{read_wav, write_wav, WavFormat};
use crate::dsp::Waveform;
use crate::error::{invalid, Error, Result};
use crate::spatial::ArrayGeometry;

pub const MANIFEST: &str = "manifest.jsonl";
pub const RECIPE: &str = "recipe.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetRecipe {
    pub count: usize,
    pub seed: u64,
    pub split: Split,
    pub sample_rate: u32,
    /// Length of training examples.
    pub train_seconds: f64,
    /// Length of dev examples (sources are truncated or repeat-padded).
    pub dev_seconds: f64,
    pub geometry: ArrayGeometry,
    pub scene: SceneConfig,
    pub augment: AugmentConfig,
    /// Directories of clean / noise WAVs; the built-in generators are used
    /// when unset.
    pub clean_dir: Option<PathBuf>,
    pub noise_dir: Option<PathBuf>,
    pub wav_format: WavFormat,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        DatasetRecipe {
            count: 8,
            seed: 0,
            split: Split::Train,
            sample_rate: 16_000,
            train_seconds: 4.0,
            dev_seconds: 6.0,
            geometry: ArrayGeometry::default(),
            scene: SceneConfig::default(),
            augment: AugmentConfig::default(),
            clean_dir: None,
            noise_dir: None,
            wav_format: WavFormat::Float32,
        }
    }
}

impl DatasetRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return invalid("dataset count must be at least 1");
        }
        if self.sample_rate == 0 || !(self.train_seconds > 0.0) || !(self.dev_seconds > 0.0) {
            return invalid("sample rate and clip lengths must be positive");
        }
        self.geometry.validate()?;
        self.scene.validate()?;
        self.augment.validate()
    }

    /// Samples per example for this split.
    pub fn clip_len(&self) -> usize {
        let secs = match self.split {
            Split::Train => self.train_seconds,
            Split::Dev => self.dev_seconds,
        };
        (secs * self.sample_rate as f64).round() as usize
    }

    /// Seed of example `index` (SplitMix64 of the recipe seed and index).
    pub fn example_seed(&self, index: usize) -> u64 {
        let mut z = self.seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub mix: String,
    pub target: String,
    pub samples: usize,
    pub room_class: RoomClass,
    pub snr_db: f64,
    pub augmentation: Option<(AugmentKind, f64)>,
    pub scene: super::scene::SceneSpec,
    pub sha256_mix: String,
    pub sha256_target: String,
}

/// Truncates or repeat-pads to exactly `len` samples.
pub fn fit_length(x: &[f64], len: usize) -> Vec<f64> {
    if x.is_empty() {
        return vec![0.0; len];
    }
    x.iter().cycle().take(len).copied().collect()
}

/// Mono sources from a directory of WAVs (first channel), sorted by name and
/// resampled to `sample_rate`.
fn load_pool(dir: &Path, sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return invalid(format!("no WAV files in {}", dir.display()));
    }
    paths
        .iter()
        .map(|p| {
            let w = read_wav(p)?;
            let x = w.channel(0).to_vec();
            Ok(if w.sample_rate() == sample_rate {
                x
            } else {
                resample(&x, w.sample_rate() as f64 / sample_rate as f64)
            })
        })
        .collect()
}

/// Source material for a dataset.
pub struct Pools {
    clean: Option<Vec<Vec<f64>>>,
    noise: Option<Vec<Vec<f64>>>,
}

impl Pools {
    pub fn load(recipe: &DatasetRecipe) -> Result<Self> {
        let load = |d: &Option<PathBuf>| d.as_ref().map(|d| load_pool(d, recipe.sample_rate)).transpose();
        Ok(Pools {
            clean: load(&recipe.clean_dir)?,
            noise: load(&recipe.noise_dir)?,
        })
    }

    pub fn synthetic() -> Self {
        Pools { clean: None, noise: None }
    }

    fn clean(&self, rng: &mut ChaCha8Rng, len: usize, sr: u32) -> Vec<f64> {
        match &self.clean {
            Some(p) => p[rng.random_range(0..p.len())].clone(),
            None => {
                // sources of varying length exercise truncation and padding
                let n = (len as f64 * rng.random_range(0.8..1.3)) as usize;
                speech_like(rng, n.max(1), sr)
            }
        }
    }

    fn noise(&self, rng: &mut ChaCha8Rng, len: usize, sr: u32) -> Vec<f64> {
        match &self.noise {
            Some(p) => p[rng.random_range(0..p.len())].clone(),
            None => colored_noise(rng, len, sr),
        }
    }
}

/// A generated example and its manifest metadata (hashes left empty).
pub struct Generated {
    pub example: TrainingExample,
    pub augmentation: Option<(AugmentKind, f64)>,
}

/// Generates example `seed` deterministically.
pub fn generate_example(recipe: &DatasetRecipe, pools: &Pools, seed: u64) -> Result<Generated> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = recipe.clip_len();
    let sr = recipe.sample_rate;
    let scene = draw_scene(&mut rng, &recipe.scene, &recipe.geometry, seed)?;
    let mut clean = pools.clean(&mut rng, len, sr);
    let aug = recipe.augment.draw(&mut rng);
    if let Some((kind, factor)) = aug {
        clean = augment(&clean, kind, factor)?;
    }
    let clean = fit_length(&clean, len);
    let noises: Vec<Vec<f64>> = (0..recipe.scene.noise_sources)
        .map(|_| fit_length(&pools.noise(&mut rng, len, sr), len))
        .collect();
    let example = simulate_example(&clean, &noises, &scene, &recipe.geometry, &recipe.scene, sr)?;
    Ok(Generated {
        example,
        augmentation: aug,
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn example_id(split: Split, index: usize) -> String {
    let s = match split {
        Split::Train => "train",
        Split::Dev => "dev",
    };
    format!("{s}_{index:05}")
}

fn write_example(root: &Path, recipe: &DatasetRecipe, id: &str, seed: u64, g: &Generated) -> Result<ManifestEntry> {
    let mix = format!("mix/{id}.wav");
    let target = format!("target/{id}.wav");
    write_wav(&root.join(&mix), &g.example.mixture, recipe.wav_format)?;
    let t = Waveform::mono(recipe.sample_rate, g.example.target.clone())?;
    write_wav(&root.join(&target), &t, recipe.wav_format)?;
    Ok(ManifestEntry {
        id: id.to_string(),
        split: recipe.split,
        seed,
        samples: g.example.mixture.len(),
        room_class: g.example.scene.room.size_class,
        snr_db: g.example.scene.snr_db,
        augmentation: g.augmentation,
        scene: g.example.scene.clone(),
        sha256_mix: sha256_file(&root.join(&mix))?,
        sha256_target: sha256_file(&root.join(&target))?,
        mix,
        target,
    })
}

/// Generates and writes a dataset; returns the manifest entries.
pub fn make_dataset(recipe: &DatasetRecipe, root: &Path) -> Result<Vec<ManifestEntry>> {
    recipe.validate()?;
    let pools = Pools::load(recipe)?;
    fs::create_dir_all(root.join("mix"))?;
    fs::create_dir_all(root.join("target"))?;
    fs::write(root.join(RECIPE), serde_json::to_string_pretty(recipe)?)?;
    let mut manifest = fs::File::create(root.join(MANIFEST))?;
    let mut entries = Vec::with_capacity(recipe.count);
    for i in 0..recipe.count {
        let seed = recipe.example_seed(i);
        let g = generate_example(recipe, &pools, seed)?;
        let e = write_example(root, recipe, &example_id(recipe.split, i), seed, &g)?;
        writeln!(manifest, "{}", serde_json::to_string(&e)?)?;
        entries.push(e);
    }
    info!("wrote {} examples to {}", entries.len(), root.display());
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

pub fn load_recipe(root: &Path) -> Result<DatasetRecipe> {
    Ok(serde_json::from_str(&fs::read_to_string(root.join(RECIPE))?)?)
}

/// Mixture and target of a manifest entry.
pub fn load_example(root: &Path, e: &ManifestEntry) -> Result<(Waveform, Vec<f64>)> {
    let mix = read_wav(&root.join(&e.mix))?;
    let target = read_wav(&root.join(&e.target))?;
    Ok((mix, target.channel(0).to_vec()))
}

/// Regenerates every manifest entry from its seed into `out` and returns the
/// ids whose file hashes differ from the manifest.
pub fn regenerate(root: &Path, out: &Path) -> Result<Vec<String>> {
    let recipe = load_recipe(root)?;
    let pools = Pools::load(&recipe)?;
    let entries = load_manifest(&root.join(MANIFEST))?;
    let mut bad = Vec::new();
    for e in &entries {
        let g = generate_example(&recipe, &pools, e.seed)?;
        let re = write_example(out, &recipe, &e.id, e.seed, &g)?;
        if re.sha256_mix != e.sha256_mix || re.sha256_target != e.sha256_target {
            bad.push(e.id.clone());
        }
    }
    Ok(bad)
}
