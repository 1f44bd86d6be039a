use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ProbeConfig};
use super::metrics::{summary_row, BoundSummary, MetricRecord};
use super::optim::Optimizer;
use super::task::{make_task, Dataset, Split};
use crate::diagnostics::{default_hvp_epsilon, hvp, lanczos_top_eigs, SharpnessProbe};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::transformer::{Batch, Mode, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Completed,
    Diverged,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Completed => "COMPLETED",
            RunStatus::Diverged => "DIVERGED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: usize,
    pub probe: SharpnessProbe,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub records: Vec<MetricRecord>,
    /// Steps at which the smallest per-layer mean entropy was below the collapse threshold.
    pub collapse_steps: Vec<usize>,
    pub final_loss: f64,
    pub final_eval: Option<f64>,
    pub probes: Vec<ProbeRecord>,
    /// Stability threshold at the base learning rate.
    pub threshold: Option<f64>,
    pub steps_run: usize,
    pub model: Model,
}

impl ExperimentResult {
    pub fn first_collapse_step(&self) -> Option<usize> {
        self.collapse_steps.first().copied()
    }

    pub fn max_sharpness(&self) -> Option<f64> {
        self.probes
            .iter()
            .map(|p| p.probe.sharpness())
            .reduce(f64::max)
    }

    pub fn summary_row(&self) -> String {
        summary_row(
            &self.run_id,
            self.status.as_str(),
            self.final_loss,
            self.final_eval,
            self.first_collapse_step(),
            self.max_sharpness(),
            self.threshold,
        )
    }
}

/// Largest-magnitude Hessian eigenvalues of the eval-mode loss on `batch`.
pub fn sharpness_probe(
    model: &Model,
    batch: &Batch,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<SharpnessProbe> {
    let theta = model.flat_params();
    let eps = cfg
        .hvp_epsilon
        .unwrap_or_else(|| default_hvp_epsilon(&theta));
    let mut work = model.clone();
    let mut grad = |p: &[f64]| -> Result<Vec<f64>> {
        work.set_flat_params(p)?;
        let (_, g) = work.loss_and_grad_only(batch, Mode::Eval)?;
        Ok(Model::flatten(&g))
    };
    let dim = theta.len();
    let iters = cfg.lanczos_iters.min(dim);
    let mut op = |v: &[f64]| hvp(&mut grad, &theta, v, eps);
    let mut probe = lanczos_top_eigs(&mut op, dim, cfg.top_k.min(iters), iters, seed)?;
    probe.hvp_epsilon = Some(eps);
    Ok(probe)
}

fn all_finite(grads: &[Matrix]) -> bool {
    grads.iter().all(|g| g.is_finite())
}

/// Fraction of correct predictions over the whole split.
pub fn evaluate(model: &mut Model, split: &Split, batch_size: usize) -> Result<f64> {
    let mut correct = 0.0;
    let mut start = 0;
    while start < split.len() {
        let b = split.range(start, batch_size);
        let n = match &b.targets {
            crate::transformer::Targets::Tokens(t) => t.iter().map(|r| r.len()).sum::<usize>(),
            crate::transformer::Targets::Labels(l) => l.len(),
        };
        correct += model.accuracy(&b)? * n as f64;
        start += batch_size;
    }
    let total = match &split.targets {
        crate::transformer::Targets::Tokens(t) => t.iter().map(|r| r.len()).sum::<usize>(),
        crate::transformer::Targets::Labels(l) => l.len(),
    };
    Ok(correct / total.max(1) as f64)
}

pub fn dataset_for(cfg: &ExperimentConfig) -> Result<Dataset> {
    let t = &cfg.task;
    make_task(
        t.kind,
        t.vocab,
        t.seq_len,
        t.n_train,
        t.n_eval,
        derive_seed(cfg.seed, Stream::Data),
    )
}

pub fn model_for(cfg: &ExperimentConfig) -> Result<Model> {
    let mut mc = cfg.model.clone();
    if mc.seed.is_none() {
        mc.seed = Some(derive_seed(cfg.seed, Stream::Init));
    }
    Model::new(mc)
}

/// Trains one configuration. Divergence is reported through the status.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let data = dataset_for(cfg)?;
    let mut model = model_for(cfg)?;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), model.params());
    let mut batch_rng = stream_rng(cfg.seed, Stream::Batches);
    let probe_seed = derive_seed(cfg.seed, Stream::Probe);
    let probe_batch = data.eval.range(0, cfg.probe.batch_size);

    let tr = &cfg.train;
    let spe = tr.steps_per_epoch;
    let base_lr = cfg.base_lr();
    let initial_tau = model.temperature();
    let log_t = (data.seq_len as f64).ln();
    let collapse_level = tr.collapse_threshold * log_t;

    let mut records = Vec::new();
    let mut collapse_steps = Vec::new();
    let mut probes = Vec::new();
    let mut status = RunStatus::Completed;
    let mut bad_streak = 0;
    let mut last_loss = f64::NAN;
    let mut final_eval = None;
    let mut steps_run = 0;

    for step in 0..tr.steps {
        steps_run = step + 1;
        let tau = cfg.intervention.tau_at(step, spe, initial_tau);
        model.set_global_temperature(tau)?;
        let lr = cfg.schedule.lr_at(step, tr.steps, base_lr);
        let idx: Vec<usize> = (0..tr.batch_size)
            .map(|_| batch_rng.random_range(0..data.train.len()))
            .collect();
        let batch = data.train.batch(&idx);

        let out = match model.loss_and_grad(&batch, Mode::Train) {
            Ok(o) => Some(o),
            Err(Error::Numerical(_)) => None,
            Err(e) => return Err(e),
        };
        let finite = out
            .as_ref()
            .is_some_and(|o| o.loss.is_finite() && all_finite(&o.grads));
        let loss = out.as_ref().map_or(f64::NAN, |o| o.loss);
        last_loss = loss;
        if finite {
            bad_streak = 0;
            let o = out.as_ref().expect("finite output");
            opt.step(model.params_mut(), &o.grads, lr)?;
            model.parameters_changed();
        } else {
            bad_streak += 1;
        }
        let snapshots = out.map(|o| o.snapshots).unwrap_or_default();
        let mean_entropy: Vec<f64> = snapshots
            .iter()
            .map(|s| s.attention_stats.mean_entropy)
            .collect();
        if !snapshots.is_empty()
            && mean_entropy.iter().copied().fold(f64::INFINITY, f64::min) < collapse_level
        {
            collapse_steps.push(step);
        }
        let diverged = bad_streak >= tr.divergence_patience;
        let last = step + 1 == tr.steps || diverged;
        let epoch_end = (step + 1) % spe == 0;

        let mut eval_metric = None;
        if (step + 1) % tr.eval_interval() == 0 || last {
            let acc = evaluate(&mut model, &data.eval, tr.eval_batch_size)?;
            eval_metric = Some(acc);
            final_eval = Some(acc);
        }
        let mut sharpness = None;
        let mut threshold = None;
        if cfg.probe.enabled && (epoch_end || cfg.probe.extra_steps.contains(&step)) && !diverged {
            let seed = probe_seed.wrapping_add(step as u64);
            match sharpness_probe(&model, &probe_batch, &cfg.probe, seed) {
                Ok(mut p) => {
                    p.threshold = cfg.optimizer.stability_threshold(lr);
                    sharpness = Some(p.sharpness());
                    threshold = p.threshold;
                    probes.push(ProbeRecord { step, probe: p });
                }
                Err(Error::Numerical(_)) => {}
                Err(e) => return Err(e),
            }
        }

        if step % tr.log_every == 0 || last || sharpness.is_some() || eval_metric.is_some() {
            let bound = if model.config().causal || snapshots.is_empty() {
                None
            } else {
                BoundSummary::from_snapshots(&snapshots)
            };
            records.push(MetricRecord {
                step,
                epoch: step / spe,
                train_loss: loss,
                eval_metric,
                lr,
                tau,
                min_entropy: snapshots
                    .iter()
                    .map(|s| s.attention_stats.min_row_entropy)
                    .collect(),
                sigma_kq: snapshots
                    .iter()
                    .map(|s| s.attention_stats.sigma_kq)
                    .collect(),
                grad_inf_norm: snapshots.iter().map(|s| s.grad_inf_norm).collect(),
                mean_entropy,
                sharpness,
                threshold,
                bound,
                wall_ms: tr
                    .record_wall_time
                    .then(|| start.elapsed().as_secs_f64() * 1e3),
            });
        }
        if diverged {
            status = RunStatus::Diverged;
            break;
        }
    }

    Ok(ExperimentResult {
        run_id: cfg.run_id.clone(),
        config: cfg.clone(),
        status,
        records,
        collapse_steps,
        final_loss: last_loss,
        final_eval,
        probes,
        threshold: cfg.optimizer.stability_threshold(base_lr),
        steps_run,
        model,
    })
}
