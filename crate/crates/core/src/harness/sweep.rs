use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::Value;

use super::config::ExperimentConfig;
use super::run::{run_experiment, ExperimentResult};
use crate::error::{Error, Result};

/// Parameter paths (dotted, e.g. `optimizer.lr`) mapped to the values to try.
pub type Grid = BTreeMap<String, Vec<Value>>;

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "grid parameter {path}: {part} is not inside an object"
            ))
        })?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!(
                "grid parameter {path} does not exist in the config"
            )));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    Err(Error::Config("empty grid parameter path".into()))
}

fn label(v: &Value) -> String {
    let s = match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Cartesian product of `grid` applied to `base`, keys in sorted order, last key varying fastest.
/// Each run keeps the base seed unless the grid sets `seed`.
pub fn expand_grid(base: &ExperimentConfig, grid: &Grid) -> Result<Vec<ExperimentConfig>> {
    let base_doc = serde_json::to_value(base)?;
    for (k, vals) in grid {
        if vals.is_empty() {
            return Err(Error::Config(format!("grid parameter {k} has no values")));
        }
    }
    let keys: Vec<&String> = grid.keys().collect();
    let total: usize = grid.values().map(|v| v.len()).product();
    let mut out = Vec::with_capacity(total);
    for mut i in 0..total {
        let mut doc = base_doc.clone();
        let mut choice = vec![0; keys.len()];
        for (j, k) in keys.iter().enumerate().rev() {
            let n = grid[*k].len();
            choice[j] = i % n;
            i /= n;
        }
        let mut tags = Vec::with_capacity(keys.len());
        for (j, k) in keys.iter().enumerate() {
            let v = grid[*k][choice[j]].clone();
            tags.push(format!(
                "{}={}",
                k.rsplit('.').next().unwrap_or(k),
                label(&v)
            ));
            set_path(&mut doc, k, v)?;
        }
        if !grid.contains_key("run_id") {
            doc["run_id"] = Value::String(format!("{}__{}", base.run_id, tags.join("__")));
        }
        let cfg: ExperimentConfig = serde_json::from_value(doc)?;
        cfg.validate()?;
        out.push(cfg);
    }
    Ok(out)
}

/// Runs every grid point on up to `parallel` threads. Results follow grid order.
pub fn grid_sweep(
    base: &ExperimentConfig,
    grid: &Grid,
    parallel: usize,
) -> Result<Vec<ExperimentResult>> {
    let configs = expand_grid(base, grid)?;
    run_all(&configs, parallel)
}

pub fn run_all(configs: &[ExperimentConfig], parallel: usize) -> Result<Vec<ExperimentResult>> {
    let workers = parallel.max(1).min(configs.len().max(1));
    if workers == 1 {
        return configs.iter().map(run_experiment).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ExperimentResult>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let r = run_experiment(&configs[i]);
                slots
                    .lock()
                    .expect("no worker panicked while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}
