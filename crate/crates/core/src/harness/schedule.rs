use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    #[default]
    Constant,
    /// Half-cosine from `base_lr` after warmup to `0` at the last step.
    Cosine,
    /// Multiply by `step_factor` at each of `step_points`.
    Step,
}

fn default_step_factor() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulePlan {
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub decay: Decay,
    #[serde(default)]
    pub step_points: Vec<usize>,
    #[serde(default = "default_step_factor")]
    pub step_factor: f64,
    /// Peak learning rate; the optimizer's `lr` is used when absent.
    #[serde(default)]
    pub base_lr: Option<f64>,
}

impl Default for SchedulePlan {
    fn default() -> Self {
        Self {
            warmup_steps: 0,
            decay: Decay::Constant,
            step_points: Vec::new(),
            step_factor: default_step_factor(),
            base_lr: None,
        }
    }
}

impl SchedulePlan {
    pub fn validate(&self) -> Result<()> {
        if let Some(lr) = self.base_lr {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!(
                    "base_lr must be non-negative, got {lr}"
                )));
            }
        }
        if !(self.step_factor >= 0.0) {
            return Err(Error::Config(format!(
                "step_factor must be non-negative, got {}",
                self.step_factor
            )));
        }
        Ok(())
    }

    /// Learning rate at step `t` (0-based) of a `total`-step run with peak `base`.
    ///
    /// Warmup is `base · t / warmup_steps`, so it starts from exactly zero.
    pub fn lr_at(&self, t: usize, total: usize, base: f64) -> f64 {
        let w = self.warmup_steps;
        if t < w {
            return base * t as f64 / w as f64;
        }
        match self.decay {
            Decay::Constant => base,
            Decay::Cosine => {
                let span = total.saturating_sub(w);
                if span == 0 {
                    return base;
                }
                let progress = ((t - w) as f64 / span as f64).min(1.0);
                0.5 * base * (1.0 + (PI * progress).cos())
            }
            Decay::Step => {
                let passed = self.step_points.iter().filter(|&&p| t >= p).count();
                base * self.step_factor.powi(passed as i32)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_constant() {
        let s = SchedulePlan {
            warmup_steps: 4,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..6).map(|t| s.lr_at(t, 10, 1.0)).collect();
        assert_eq!(lrs, vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.0]);
    }

    #[test]
    fn cosine_endpoints() {
        let s = SchedulePlan {
            warmup_steps: 10,
            decay: Decay::Cosine,
            ..Default::default()
        };
        assert_eq!(s.lr_at(10, 110, 2.0), 2.0);
        assert!((s.lr_at(60, 110, 2.0) - 1.0).abs() < 1e-15);
        assert!(s.lr_at(110, 110, 2.0).abs() < 1e-15);
    }

    #[test]
    fn step_decay() {
        let s = SchedulePlan {
            decay: Decay::Step,
            step_points: vec![5, 8],
            step_factor: 0.5,
            ..Default::default()
        };
        assert_eq!(s.lr_at(4, 10, 1.0), 1.0);
        assert_eq!(s.lr_at(5, 10, 1.0), 0.5);
        assert_eq!(s.lr_at(9, 10, 1.0), 0.25);
    }
}
