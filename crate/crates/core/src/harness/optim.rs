//! SGD, heavy-ball SGD, Adam, AdamW (decoupled decay) and LARS.

use serde::{Deserialize, Serialize};

use crate::diagnostics::adamw_stability_threshold;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::transformer::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
    AdamW,
    Lars,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global-norm gradient clipping threshold.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl OptimizerConfig {
    pub fn adamw(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            weight_decay: 0.0,
            momentum: default_momentum(),
            eps: default_eps(),
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        for (name, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("momentum", self.momentum),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config(
                "weight_decay must be >= 0 and eps > 0".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }

    /// Sharpness above which the optimizer's quadratic-model iteration
    /// diverges at learning rate `lr`: `(2 + 2β₁)/(1 − β₁)/η` for Adam(W),
    /// `2/η` for SGD, `(2 + 2μ)/η` for heavy-ball SGD. `None` for LARS or `η = 0`.
    pub fn stability_threshold(&self, lr: f64) -> Option<f64> {
        if !(lr > 0.0) {
            return None;
        }
        match self.kind {
            OptimizerKind::Adam | OptimizerKind::AdamW => {
                adamw_stability_threshold(self.beta1, lr).ok()
            }
            OptimizerKind::Sgd => Some(2.0 / lr),
            OptimizerKind::SgdMomentum => Some((2.0 + 2.0 * self.momentum) / lr),
            OptimizerKind::Lars => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    t: u64,
}

/// `‖g‖₂` over all tensors.
pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    n
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &[Param]) -> Self {
        let zeros = |p: &Param| Matrix::zeros(p.value.rows(), p.value.cols());
        Self {
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            cfg,
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update with learning rate `lr`. Gradient clipping, when
    /// configured, is applied first.
    pub fn step(&mut self, params: &mut [Param], grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!(
                        "{} is {:?} but its gradient is {:?}",
                        p.name,
                        p.value.shape(),
                        g.shape()
                    ),
                ));
            }
        }
        let mut clipped;
        let grads = match self.cfg.grad_clip {
            Some(c) => {
                clipped = grads.to_vec();
                clip_global_norm(&mut clipped, c);
                &clipped[..]
            }
            None => grads,
        };
        self.t += 1;
        let c = &self.cfg;
        let wd = c.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.decay { wd } else { 0.0 };
            let theta = p.value.data_mut();
            let g = g.data();
            let m = self.first[i].data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for k in 0..theta.len() {
                        theta[k] -= lr * (g[k] + decay * theta[k]);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    for k in 0..theta.len() {
                        m[k] = c.momentum * m[k] + g[k] + decay * theta[k];
                        theta[k] -= lr * m[k];
                    }
                }
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let v = self.second[i].data_mut();
                    let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                    let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                    let decoupled = c.kind == OptimizerKind::AdamW;
                    for k in 0..theta.len() {
                        let gk = if decoupled {
                            g[k]
                        } else {
                            g[k] + decay * theta[k]
                        };
                        m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                        v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                        let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                        if decoupled {
                            theta[k] -= lr * decay * theta[k];
                        }
                        theta[k] -= lr * update;
                    }
                }
                OptimizerKind::Lars => {
                    // trust ratio ‖θ‖/‖g‖ per weight matrix; biases and gains use plain momentum
                    let adapted: Vec<f64> =
                        (0..theta.len()).map(|k| g[k] + decay * theta[k]).collect();
                    let local = if p.decay {
                        let tn = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let gn = adapted.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if tn > 0.0 && gn > 0.0 {
                            tn / gn
                        } else {
                            1.0
                        }
                    } else {
                        1.0
                    };
                    for k in 0..theta.len() {
                        m[k] = c.momentum * m[k] + local * adapted[k];
                        theta[k] -= lr * m[k];
                    }
                }
            }
        }
        Ok(())
    }
}
