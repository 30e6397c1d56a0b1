//! Speed and volume perturbation of clean sources.
//!
//! Tempo perturbation (pitch-preserving stretch) is not implemented; its
//! share of the selection ratio goes to speed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::resample;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Speed,
    Volume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability that a source is perturbed at all.
    pub probability: f64,
    /// Selection weights speed : tempo : volume.
    pub ratio: [f64; 3],
    pub speed_range: [f64; 2],
    pub volume_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            probability: 0.5,
            ratio: [1.0, 2.0, 3.0],
            speed_range: [0.9, 1.1],
            volume_range: [0.25, 4.0],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return invalid("augmentation probability must lie in [0, 1]");
        }
        if self.ratio.iter().any(|&r| r < 0.0) || self.ratio.iter().sum::<f64>() <= 0.0 {
            return invalid("augmentation ratio weights must be non-negative and not all zero");
        }
        let [s0, s1] = self.speed_range;
        let [v0, v1] = self.volume_range;
        if !(0.9..=1.1).contains(&s0) || !(0.9..=1.1).contains(&s1) || s0 > s1 {
            return invalid("speed range must lie within [0.9, 1.1]");
        }
        if !(0.25..=4.0).contains(&v0) || !(0.25..=4.0).contains(&v1) || v0 > v1 {
            return invalid("volume range must lie within [0.25, 4.0]");
        }
        Ok(())
    }

    /// Effective weights of the implemented kinds (tempo folded into speed).
    pub fn effective_weights(&self) -> [(AugmentKind, f64); 2] {
        [
            (AugmentKind::Speed, self.ratio[0] + self.ratio[1]),
            (AugmentKind::Volume, self.ratio[2]),
        ]
    }

    /// Draws an optional `(kind, factor)`.
    pub fn draw(&self, rng: &mut impl Rng) -> Option<(AugmentKind, f64)> {
        if rng.random::<f64>() >= self.probability {
            return None;
        }
        let w = self.effective_weights();
        let total = w[0].1 + w[1].1;
        let kind = if rng.random::<f64>() * total < w[0].1 {
            AugmentKind::Speed
        } else {
            AugmentKind::Volume
        };
        let [lo, hi] = match kind {
            AugmentKind::Speed => self.speed_range,
            AugmentKind::Volume => self.volume_range,
        };
        let factor = if lo == hi { lo } else { rng.random_range(lo..hi) };
        Some((kind, factor))
    }
}

/// Applies a perturbation. Speed resamples (duration / factor, pitch x factor);
/// volume scales.
pub fn augment(x: &[f64], kind: AugmentKind, factor: f64) -> Result<Vec<f64>> {
    match kind {
        AugmentKind::Speed => {
            if !(0.9..=1.1).contains(&factor) {
                return invalid(format!("speed factor {factor} outside [0.9, 1.1]"));
            }
            if factor == 1.0 {
                return Ok(x.to_vec());
            }
            Ok(resample(x, factor))
        }
        AugmentKind::Volume => {
            if !(0.25..=4.0).contains(&factor) {
                return invalid(format!("volume factor {factor} outside [0.25, 4.0]"));
            }
            Ok(x.iter().map(|v| v * factor).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn volume_halves_exactly() {
        let x = [0.3, -1.7, 2.0];
        assert_eq!(augment(&x, AugmentKind::Volume, 0.5).unwrap(), vec![0.15, -0.85, 1.0]);
    }

    #[test]
    fn unit_speed_is_identity() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64).cos()).collect();
        assert_eq!(augment(&x, AugmentKind::Speed, 1.0).unwrap(), x);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(augment(&[1.0], AugmentKind::Speed, 1.2).is_err());
        assert!(augment(&[1.0], AugmentKind::Volume, 5.0).is_err());
    }

    #[test]
    fn tempo_share_goes_to_speed() {
        let cfg = AugmentConfig {
            probability: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 6000;
        let speed = (0..n).filter(|_| cfg.draw(&mut rng).unwrap().0 == AugmentKind::Speed).count();
        // expected 1:1 after folding 1:2:3
        assert!((speed as f64 / n as f64 - 0.5).abs() < 0.03);
    }
}
