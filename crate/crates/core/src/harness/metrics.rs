//! Metric records, JSONL streams and summary tables.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{entropy_lower_bound, CERTIFICATE_SLACK};
use crate::error::Result;
use crate::transformer::LayerSnapshot;

/// Per-layer entropy bound at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub sigma_bar: Vec<f64>,
    pub bound_nats: Vec<f64>,
    /// Every layer's smallest row entropy is at or above its bound.
    pub satisfied: bool,
}

impl BoundSummary {
    pub fn from_snapshots(snapshots: &[LayerSnapshot]) -> Option<Self> {
        let mut sigma_bar = Vec::with_capacity(snapshots.len());
        let mut bound_nats = Vec::with_capacity(snapshots.len());
        let mut satisfied = true;
        for s in snapshots {
            let st = &s.attention_stats;
            let sb = st.sigma_bar();
            let b = entropy_lower_bound(sb, st.seq_len).ok()?;
            if st.min_row_entropy < b - CERTIFICATE_SLACK {
                satisfied = false;
            }
            sigma_bar.push(sb);
            bound_nats.push(b);
        }
        Some(Self {
            sigma_bar,
            bound_nats,
            satisfied,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    /// Eval accuracy; present on evaluation steps only.
    pub eval_metric: Option<f64>,
    pub lr: f64,
    pub tau: f64,
    /// Per layer, mean attention entropy (nats).
    pub mean_entropy: Vec<f64>,
    /// Per layer, smallest row entropy.
    pub min_entropy: Vec<f64>,
    /// Per layer, `max_h ‖W_K^h W_Q^hᵀ‖₂`.
    pub sigma_kq: Vec<f64>,
    /// Per layer, `‖·‖∞` of the attention-weight gradient.
    pub grad_inf_norm: Vec<f64>,
    /// `|λ₁|` of the loss Hessian on the probe batch.
    pub sharpness: Option<f64>,
    pub threshold: Option<f64>,
    pub bound: Option<BoundSummary>,
    pub wall_ms: Option<f64>,
}

impl MetricRecord {
    /// Smallest per-layer mean entropy.
    pub fn min_layer_entropy(&self) -> f64 {
        self.mean_entropy
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// One compact JSON object per line.
pub fn write_jsonl<W: Write>(w: &mut W, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, records)?;
    w.flush()?;
    Ok(())
}

/// Reads a metric stream as generic JSON values (non-finite numbers are
/// written as `null`, which the typed record cannot hold).
pub fn read_jsonl_values(path: &Path) -> Result<Vec<serde_json::Value>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub const SUMMARY_HEADER: &str =
    "run_id,status,final_loss,final_eval,first_collapse_step,max_sharpness,threshold";

/// Shortest round-trip form, switching to exponent notation for very small or large magnitudes.
fn num(x: f64) -> String {
    let a = x.abs();
    if x.is_finite() && a != 0.0 && !(1e-4..1e15).contains(&a) {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// One CSV row (no trailing newline).
pub fn summary_row(
    run_id: &str,
    status: &str,
    final_loss: f64,
    final_eval: Option<f64>,
    first_collapse_step: Option<usize>,
    max_sharpness: Option<f64>,
    threshold: Option<f64>,
) -> String {
    let id = if run_id.contains([',', '"', '\n']) {
        format!("\"{}\"", run_id.replace('"', "\"\""))
    } else {
        run_id.to_string()
    };
    format!(
        "{id},{status},{},{},{},{},{}",
        num(final_loss),
        opt(final_eval),
        first_collapse_step
            .map(|s| s.to_string())
            .unwrap_or_default(),
        opt(max_sharpness),
        opt(threshold)
    )
}
