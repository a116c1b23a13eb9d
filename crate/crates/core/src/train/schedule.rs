use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};

/// Learning rate and momentum (Adam `beta1`) at one optimiser step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulePoint {
    pub lr: f64,
    pub momentum: f64,
}

fn cosine(start: f64, end: f64, frac: f64) -> f64 {
    end + (start - end) / 2.0 * (1.0 + (PI * frac).cos())
}

/// Step at which the learning rate peaks: `round(pct_warmup * total)`,
/// kept strictly inside `(0, total)`.
pub fn warmup_boundary(total_steps: usize, pct_warmup: f64) -> usize {
    ((pct_warmup * total_steps as f64).round() as usize).clamp(1, total_steps - 1)
}

/// One-cycle policy with cosine phases.
///
/// The learning rate rises from `peak / div_start` to `peak` at the warmup
/// boundary, then falls to `peak / div_final` at `total_steps`. Momentum
/// runs the opposite way between `momentum_range.0` (high) and `.1` (low).
pub fn one_cycle_schedule(step: usize, total_steps: usize, config: &TrainConfig) -> Result<SchedulePoint, TrainError> {
    if total_steps < 2 {
        return Err(TrainError::Config(format!(
            "one-cycle schedule needs at least 2 steps, got {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(TrainError::Config(format!(
            "schedule step {step} is outside [0, {total_steps}]"
        )));
    }
    let peak = config.peak_lr();
    let (initial, last) = (peak / config.div_start, peak / config.div_final);
    let (high, low) = config.momentum_range;
    let boundary = warmup_boundary(total_steps, config.pct_warmup);
    Ok(if step <= boundary {
        let frac = step as f64 / boundary as f64;
        SchedulePoint {
            lr: cosine(initial, peak, frac),
            momentum: cosine(high, low, frac),
        }
    } else {
        let frac = (step - boundary) as f64 / (total_steps - boundary) as f64;
        SchedulePoint {
            lr: cosine(peak, last, frac),
            momentum: cosine(low, high, frac),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::LrAnchor;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn default_endpoints() {
        let cfg = TrainConfig::default();
        let total = 1000;
        let start = one_cycle_schedule(0, total, &cfg).unwrap();
        let peak = one_cycle_schedule(250, total, &cfg).unwrap();
        let end = one_cycle_schedule(total, total, &cfg).unwrap();
        assert!(rel(start.lr, 4e-4) < 1e-12);
        assert!(rel(peak.lr, 1e-2) < 1e-12);
        assert!(rel(end.lr, 1e-6) < 1e-12);
        assert!(rel(start.momentum, 0.95) < 1e-12);
        assert!(rel(peak.momentum, 0.85) < 1e-12);
        assert!(rel(end.momentum, 0.95) < 1e-12);
    }

    #[test]
    fn literal_anchor_starts_at_configured_rate() {
        let cfg = TrainConfig {
            lr_anchor: LrAnchor::Initial,
            ..TrainConfig::default()
        };
        let start = one_cycle_schedule(0, 100, &cfg).unwrap();
        assert!(rel(start.lr, 1e-2) < 1e-12);
        let peak = one_cycle_schedule(25, 100, &cfg).unwrap();
        assert!(rel(peak.lr, 0.25) < 1e-12);
    }

    #[test]
    fn out_of_range_is_an_error() {
        let cfg = TrainConfig::default();
        assert!(one_cycle_schedule(11, 10, &cfg).is_err());
        assert!(one_cycle_schedule(0, 1, &cfg).is_err());
    }

    #[test]
    fn two_step_cycle() {
        let cfg = TrainConfig::default();
        assert_eq!(warmup_boundary(2, 0.25), 1);
        assert!(rel(one_cycle_schedule(1, 2, &cfg).unwrap().lr, 1e-2) < 1e-12);
    }

    proptest! {
        #[test]
        fn unimodal_with_inverse_momentum(total in 2usize..3000, pct in 0.05f64..0.95) {
            let cfg = TrainConfig { pct_warmup: pct, ..TrainConfig::default() };
            let b = warmup_boundary(total, pct);
            let pts: Vec<SchedulePoint> = (0..=total).map(|t| one_cycle_schedule(t, total, &cfg).unwrap()).collect();
            for t in 0..total {
                if t < b {
                    prop_assert!(pts[t + 1].lr > pts[t].lr);
                    prop_assert!(pts[t + 1].momentum < pts[t].momentum);
                } else {
                    prop_assert!(pts[t + 1].lr < pts[t].lr);
                    prop_assert!(pts[t + 1].momentum > pts[t].momentum);
                }
            }
            let argmax = (0..=total).max_by(|&a, &c| pts[a].lr.total_cmp(&pts[c].lr)).unwrap();
            let argmin = (0..=total).min_by(|&a, &c| pts[a].momentum.total_cmp(&pts[c].momentum)).unwrap();
            prop_assert_eq!(argmax, b);
            prop_assert_eq!(argmin, b);
        }
    }
}
