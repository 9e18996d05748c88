use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Time and frequency masking of input features.
///
/// Each time mask has a length drawn uniformly from
/// `time_mask_min..=time_mask_max`, clamped to the utterance, and a uniform
/// start; masks may overlap. Each frequency mask covers a band of width
/// uniform in `0..=freq_mask_width` (clamped to the feature count) across all
/// frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPolicy {
    pub n_time_masks: usize,
    pub time_mask_min: usize,
    pub time_mask_max: usize,
    pub n_freq_masks: usize,
    pub freq_mask_width: usize,
    pub mask_value: f64,
}

/// Short time masking: many short time masks plus the LD frequency masks.
impl Default for MaskPolicy {
    fn default() -> Self {
        Self::stm(80)
    }
}

impl MaskPolicy {
    pub fn off() -> Self {
        Self {
            n_time_masks: 0,
            time_mask_min: 0,
            time_mask_max: 0,
            n_freq_masks: 0,
            freq_mask_width: 0,
            mask_value: 0.0,
        }
    }

    /// SpecAugment's LD policy (two time masks up to 100 frames, two
    /// frequency masks up to 27 of 80 bins), with the band width rescaled to
    /// `feature_dim` features.
    pub fn ld(feature_dim: usize) -> Self {
        Self {
            n_time_masks: 2,
            time_mask_min: 0,
            time_mask_max: 100,
            n_freq_masks: 2,
            freq_mask_width: ((27 * feature_dim) as f64 / 80.0).round() as usize,
            mask_value: 0.0,
        }
    }

    /// LD frequency masking with 15 time masks of 16 to 32 frames.
    pub fn stm(feature_dim: usize) -> Self {
        Self {
            n_time_masks: 15,
            time_mask_min: 16,
            time_mask_max: 32,
            ..Self::ld(feature_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_mask_min > self.time_mask_max {
            return Err(Error::config("time_mask_min", "must not exceed time_mask_max"));
        }
        if !self.mask_value.is_finite() {
            return Err(Error::config("mask_value", "must be finite"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.n_time_masks == 0 && self.n_freq_masks == 0
    }
}

pub fn apply_masking(frames: &Matrix, policy: &MaskPolicy, rng: &mut Rng) -> Result<Matrix> {
    if frames.rows() == 0 {
        return Err(Error::Empty("masking an empty utterance"));
    }
    policy.validate()?;
    let (t, f) = frames.shape();
    let mut out = frames.clone();
    for _ in 0..policy.n_time_masks {
        let len = rng.between(policy.time_mask_min, policy.time_mask_max).min(t);
        let start = rng.between(0, t - len);
        for r in start..start + len {
            out.row_mut(r).iter_mut().for_each(|v| *v = policy.mask_value);
        }
    }
    for _ in 0..policy.n_freq_masks {
        let width = rng.between(0, policy.freq_mask_width).min(f);
        let start = rng.between(0, f - width);
        for r in 0..t {
            out.row_mut(r)[start..start + width]
                .iter_mut()
                .for_each(|v| *v = policy.mask_value);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(t: usize, f: usize) -> Matrix {
        Matrix::from_fn(t, f, |r, c| 1.0 + (r * f + c) as f64)
    }

    #[test]
    fn no_masks_is_identity() {
        let x = frames(10, 4);
        assert_eq!(apply_masking(&x, &MaskPolicy::off(), &mut Rng::new(0)).unwrap(), x);
    }

    #[test]
    fn long_mask_clamps_to_utterance() {
        let x = frames(5, 3);
        let policy = MaskPolicy {
            n_time_masks: 1,
            time_mask_min: 8,
            time_mask_max: 8,
            ..MaskPolicy::off()
        };
        let y = apply_masking(&x, &policy, &mut Rng::new(1)).unwrap();
        assert_eq!(y.shape(), (5, 3));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frequency_masks_cover_whole_columns() {
        let x = frames(6, 8);
        let policy = MaskPolicy {
            n_freq_masks: 2,
            freq_mask_width: 3,
            ..MaskPolicy::off()
        };
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let y = apply_masking(&x, &policy, &mut rng).unwrap();
            for c in 0..8 {
                let masked = (0..6).filter(|&r| y.get(r, c) == 0.0).count();
                assert!(masked == 0 || masked == 6);
            }
        }
    }

    /// Closed-form probability that frame `pos` is covered by one time mask
    /// under clamped-uniform length and uniform start.
    fn cover_probability(t: usize, pos: usize, lo: usize, hi: usize) -> f64 {
        let n_len = (hi - lo + 1) as f64;
        (lo..=hi)
            .map(|l| {
                let l = l.min(t);
                let starts = t - l + 1;
                let first = pos.saturating_sub(l.saturating_sub(1));
                let last = pos.min(t - l);
                let covering = if l == 0 || first > last { 0 } else { last - first + 1 };
                covering as f64 / starts as f64 / n_len
            })
            .sum()
    }

    #[test]
    fn masked_fraction_matches_expectation() {
        let (t, n_masks, lo, hi) = (60, 3, 4, 12);
        let policy = MaskPolicy {
            n_time_masks: n_masks,
            time_mask_min: lo,
            time_mask_max: hi,
            mask_value: 0.0,
            ..MaskPolicy::off()
        };
        let expected: f64 = (0..t)
            .map(|p| 1.0 - (1.0 - cover_probability(t, p, lo, hi)).powi(n_masks as i32))
            .sum::<f64>()
            / t as f64;
        let x = frames(t, 2);
        let mut rng = Rng::new(9);
        let draws = 10_000;
        let mut masked = 0usize;
        for _ in 0..draws {
            let y = apply_masking(&x, &policy, &mut rng).unwrap();
            masked += (0..t).filter(|&r| y.get(r, 0) == 0.0).count();
        }
        let observed = masked as f64 / (draws * t) as f64;
        assert!((observed - expected).abs() / expected < 0.02, "{observed} vs {expected}");
    }

    #[test]
    fn presets() {
        let stm = MaskPolicy::default();
        assert_eq!((stm.n_time_masks, stm.time_mask_min, stm.time_mask_max), (15, 16, 32));
        assert_eq!(MaskPolicy::ld(80).freq_mask_width, 27);
        assert!(MaskPolicy::off().is_identity());
    }
}
