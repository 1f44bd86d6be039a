use serde::{Deserialize, Serialize};

use super::optim::OptimizerConfig;
use super::schedule::SchedulePlan;
use super::task::{TaskConfig, TaskKind};
use crate::error::{Error, Result};
use crate::transformer::{ModelConfig, OutputMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    #[default]
    None,
    /// Switch the global attention temperature to `tau_target`.
    Temperature,
}

fn default_tau_target() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionPlan {
    #[serde(default)]
    pub kind: InterventionKind,
    /// First step that runs at the target temperature.
    #[serde(default)]
    pub intervention_step: Option<usize>,
    /// Alias: the first step of this epoch.
    #[serde(default)]
    pub intervention_epoch: Option<usize>,
    #[serde(default = "default_tau_target")]
    pub tau_target: f64,
}

impl Default for InterventionPlan {
    fn default() -> Self {
        Self {
            kind: InterventionKind::None,
            intervention_step: None,
            intervention_epoch: None,
            tau_target: 1.0,
        }
    }
}

impl InterventionPlan {
    pub fn temperature(step: usize, tau_target: f64) -> Self {
        Self {
            kind: InterventionKind::Temperature,
            intervention_step: Some(step),
            intervention_epoch: None,
            tau_target,
        }
    }

    /// Resolved intervention step, if any.
    pub fn step(&self, steps_per_epoch: usize) -> Option<usize> {
        match self.kind {
            InterventionKind::None => None,
            InterventionKind::Temperature => self
                .intervention_step
                .or(self.intervention_epoch.map(|e| e * steps_per_epoch)),
        }
    }

    /// Temperature in effect at `step` given the model's initial temperature.
    pub fn tau_at(&self, step: usize, steps_per_epoch: usize, initial: f64) -> f64 {
        match self.step(steps_per_epoch) {
            Some(s) if step >= s => self.tau_target,
            _ => initial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_target > 0.0) || !self.tau_target.is_finite() {
            return Err(Error::Config(format!(
                "tau_target must be positive, got {}",
                self.tau_target
            )));
        }
        if self.kind == InterventionKind::Temperature {
            match (self.intervention_step, self.intervention_epoch) {
                (None, None) => {
                    return Err(Error::Config(
                        "temperature intervention needs intervention_step or intervention_epoch"
                            .into(),
                    ))
                }
                (Some(_), Some(_)) => {
                    return Err(Error::Config(
                        "give only one of intervention_step and intervention_epoch".into(),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn default_steps_per_epoch() -> usize {
    200
}
fn default_one() -> usize {
    1
}
fn default_collapse_threshold() -> f64 {
    0.1
}
fn default_patience() -> usize {
    3
}
fn default_eval_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_steps_per_epoch")]
    pub steps_per_epoch: usize,
    #[serde(default = "default_one")]
    pub log_every: usize,
    /// Evaluate every this many steps (and after the last step); defaults to once per epoch.
    #[serde(default)]
    pub eval_every: Option<usize>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// A collapse event is logged when the smallest per-layer mean entropy
    /// falls below this fraction of `log T`.
    #[serde(default = "default_collapse_threshold")]
    pub collapse_threshold: f64,
    /// Consecutive non-finite steps before the run is marked diverged.
    #[serde(default = "default_patience")]
    pub divergence_patience: usize,
    /// Record wall-clock time per logged step; makes metric files non-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize) -> Self {
        Self {
            steps,
            batch_size,
            steps_per_epoch: default_steps_per_epoch(),
            log_every: 1,
            eval_every: None,
            eval_batch_size: default_eval_batch(),
            collapse_threshold: default_collapse_threshold(),
            divergence_patience: default_patience(),
            record_wall_time: false,
        }
    }

    pub fn eval_interval(&self) -> usize {
        self.eval_every.unwrap_or(self.steps_per_epoch).max(1)
    }
}

fn default_top_k() -> usize {
    5
}
fn default_lanczos_iters() -> usize {
    20
}
fn default_probe_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_lanczos_iters")]
    pub lanczos_iters: usize,
    /// Size of the fixed held-out batch (taken from the start of the eval split).
    #[serde(default = "default_probe_batch")]
    pub batch_size: usize,
    /// Finite-difference step for Hessian-vector products; scaled default when absent.
    #[serde(default)]
    pub hvp_epsilon: Option<f64>,
    /// Extra steps (after the update of that step) at which to probe, besides epoch ends.
    #[serde(default)]
    pub extra_steps: Vec<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            top_k: default_top_k(),
            lanczos_iters: default_lanczos_iters(),
            batch_size: default_probe_batch(),
            hvp_epsilon: None,
            extra_steps: Vec::new(),
        }
    }
}

fn default_run_id() -> String {
    "run".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: SchedulePlan,
    #[serde(default)]
    pub intervention: InterventionPlan,
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Learning rate at the schedule's peak.
    pub fn base_lr(&self) -> f64 {
        self.schedule.base_lr.unwrap_or(self.optimizer.lr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.intervention.validate()?;
        let t = &self.task;
        if t.vocab != self.model.vocab_size {
            return Err(Error::Config(format!(
                "task vocab {} differs from model vocab_size {}",
                t.vocab, self.model.vocab_size
            )));
        }
        if t.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "task seq_len {} exceeds model max_seq_len {}",
                t.seq_len, self.model.max_seq_len
            )));
        }
        let wants_pooled = !t.kind.is_sequence_labelling();
        if wants_pooled != (self.model.output == OutputMode::Pooled) {
            return Err(Error::Config(format!(
                "task {:?} needs model output {}",
                t.kind,
                if wants_pooled { "pooled" } else { "tokens" }
            )));
        }
        if t.n_train == 0 || t.n_eval == 0 {
            return Err(Error::Config("n_train and n_eval must be positive".into()));
        }
        let tr = &self.train;
        if tr.batch_size == 0
            || tr.steps_per_epoch == 0
            || tr.log_every == 0
            || tr.eval_batch_size == 0
        {
            return Err(Error::Config(
                "batch sizes and intervals must be positive".into(),
            ));
        }
        if tr.divergence_patience == 0 {
            return Err(Error::Config("divergence_patience must be positive".into()));
        }
        if !(tr.collapse_threshold >= 0.0) {
            return Err(Error::Config(
                "collapse_threshold must be non-negative".into(),
            ));
        }
        if self.probe.enabled {
            let p = &self.probe;
            if p.top_k == 0 || p.top_k > p.lanczos_iters || p.batch_size == 0 {
                return Err(Error::Config(
                    "probe needs 0 < top_k <= lanczos_iters and a non-empty batch".into(),
                ));
            }
        }
        Ok(())
    }

    /// A small, fast default: two-layer post-LN encoder on the reverse task.
    pub fn toy(task: TaskKind) -> Self {
        let mut model = ModelConfig::toy(
            crate::transformer::NormMode::PostLn,
            crate::reparam::ReparamMode::Plain,
        );
        model.d_model = 32;
        model.n_heads = 2;
        model.mlp_dim = 64;
        model.vocab_size = 16;
        model.max_seq_len = 8;
        if task == TaskKind::Majority {
            model.output = OutputMode::Pooled;
        }
        Self {
            schema_version: SCHEMA_VERSION,
            run_id: default_run_id(),
            seed: 0,
            model,
            task: TaskConfig {
                kind: task,
                vocab: 16,
                seq_len: 8,
                n_train: 2048,
                n_eval: 256,
            },
            optimizer: OptimizerConfig::adamw(1e-3),
            schedule: SchedulePlan::default(),
            intervention: InterventionPlan::default(),
            train: TrainConfig::new(200, 32),
            probe: ProbeConfig::default(),
        }
    }
}
