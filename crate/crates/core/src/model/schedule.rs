use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Warm-up, hold, linear decay.
///
/// The learning rate ramps linearly from `init_lr_scale × base_lr` to
/// `base_lr` over the warm-up steps, stays at `base_lr`, then decays
/// linearly to `final_lr_scale × base_lr` at `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriStageSchedule {
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub hold_fraction: f64,
    pub base_lr: f64,
    pub init_lr_scale: f64,
    pub final_lr_scale: f64,
}

impl Default for TriStageSchedule {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            warmup_fraction: 0.04,
            hold_fraction: 0.48,
            base_lr: 1e-3,
            init_lr_scale: 0.01,
            final_lr_scale: 0.01,
        }
    }
}

impl TriStageSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.hold_fraction > 0.0) {
            return Err(Error::config("warmup_fraction", "stage fractions must be positive"));
        }
        if self.warmup_fraction + self.hold_fraction > 1.0 {
            return Err(Error::config("hold_fraction", "warmup + hold must not exceed 1"));
        }
        for (field, v) in [
            ("init_lr_scale", self.init_lr_scale),
            ("final_lr_scale", self.final_lr_scale),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(field, "must lie in (0, 1]"));
            }
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    pub fn hold_steps(&self) -> usize {
        let h = (self.hold_fraction * self.total_steps as f64).round() as usize;
        h.min(self.total_steps - self.warmup_steps())
    }
}

pub fn lr_at(schedule: &TriStageSchedule, step: usize) -> Result<f64> {
    let total = schedule.total_steps;
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    let base = schedule.base_lr;
    let warm = schedule.warmup_steps();
    let hold_end = warm + schedule.hold_steps();
    let lr = if step < warm {
        let frac = step as f64 / warm as f64;
        base * (schedule.init_lr_scale + (1.0 - schedule.init_lr_scale) * frac)
    } else if step <= hold_end || hold_end == total {
        base
    } else {
        let frac = (step - hold_end) as f64 / (total - hold_end) as f64;
        base * (1.0 - (1.0 - schedule.final_lr_scale) * frac)
    };
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> TriStageSchedule {
        TriStageSchedule {
            total_steps: 1000,
            base_lr: 0.5,
            ..TriStageSchedule::default()
        }
    }

    #[test]
    fn boundaries() {
        let s = sched();
        assert_eq!(s.warmup_steps(), 40);
        assert_eq!(lr_at(&s, 0).unwrap(), 0.5 * 0.01);
        assert_eq!(lr_at(&s, 40).unwrap(), 0.5);
        assert_eq!(lr_at(&s, 300).unwrap(), 0.5);
        assert!((lr_at(&s, 1000).unwrap() - 0.5 * 0.01).abs() < 1e-15);
        assert!(matches!(lr_at(&s, 1001), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn continuous_across_stages() {
        let s = sched();
        // largest per-step change of a piecewise-linear ramp is its slope
        let max_slope = 0.5 * 0.99 / 40.0;
        for step in 1..=1000 {
            let d = (lr_at(&s, step).unwrap() - lr_at(&s, step - 1).unwrap()).abs();
            assert!(d <= max_slope + 1e-12, "jump at {step}");
        }
        // the pieces meet exactly at both stage boundaries
        let warm_end = s.warmup_steps();
        let hold_end = warm_end + s.hold_steps();
        let left = 0.5 * (0.01 + 0.99 * (warm_end as f64) / warm_end as f64);
        assert!((left - lr_at(&s, warm_end).unwrap()).abs() < 1e-12);
        let right = 0.5 * (1.0 - 0.99 * 0.0);
        assert!((right - lr_at(&s, hold_end).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        let bad = TriStageSchedule {
            warmup_fraction: 0.6,
            hold_fraction: 0.6,
            ..sched()
        };
        assert!(bad.validate().is_err());
        assert!(sched().validate().is_ok());
    }
}
