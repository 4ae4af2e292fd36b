use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Linear warm-up to 1, then cosine decay to 0 at `total_steps`.
    CosineWarmupLr,
    /// Repeating cycles: cosine ramp 0 → 1 over the first half, hold at 1.
    CosineCyclicalKl,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    /// Warm-up length for the LR schedule or cycle period for the KL schedule.
    pub span_steps: usize,
    /// Total steps of the run (the LR schedule decays to 0 here).
    pub total_steps: usize,
}

impl Schedule {
    pub fn lr(total_steps: usize, warmup_fraction: f64) -> Self {
        Self {
            kind: ScheduleKind::CosineWarmupLr,
            span_steps: (warmup_fraction * total_steps as f64).round() as usize,
            total_steps,
        }
    }

    pub fn kl(period_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::CosineCyclicalKl,
            span_steps: period_steps.max(2),
            total_steps: 0,
        }
    }

    /// Multiplier in `[0, 1]` at `step`.
    pub fn value(&self, step: usize) -> f64 {
        match self.kind {
            ScheduleKind::CosineWarmupLr => {
                let w = self.span_steps;
                if step < w {
                    return step as f64 / w as f64;
                }
                let rest = self.total_steps.saturating_sub(w).max(1);
                let progress = ((step - w) as f64 / rest as f64).min(1.0);
                0.5 * (1.0 + (PI * progress).cos())
            }
            ScheduleKind::CosineCyclicalKl => {
                let period = self.span_steps;
                let half = period as f64 / 2.0;
                let t = (step % period) as f64;
                if t >= half {
                    1.0
                } else {
                    0.5 * (1.0 - (PI * t / half).cos())
                }
            }
        }
    }
}
