//! Experiment engine: optimizers, schedules, temperature interventions,
//! synthetic tasks, the training loop and its metric stream.

mod config;
mod metrics;
mod optim;
mod run;
mod schedule;
mod sweep;
mod task;

pub use config::{
    ExperimentConfig, InterventionKind, InterventionPlan, ProbeConfig, TrainConfig, SCHEMA_VERSION,
};
pub use metrics::{
    read_jsonl_values, save_jsonl, summary_row, write_jsonl, BoundSummary, MetricRecord,
    SUMMARY_HEADER,
};
pub use optim::{clip_global_norm, global_norm, Optimizer, OptimizerConfig, OptimizerKind};
pub use run::{
    dataset_for, evaluate, model_for, run_experiment, sharpness_probe, ExperimentResult,
    ProbeRecord, RunStatus,
};
pub use schedule::{Decay, SchedulePlan};
pub use sweep::{expand_grid, grid_sweep, run_all, Grid};
pub use task::{majority_label, make_task, reverse_target, Dataset, Split, TaskConfig, TaskKind};
