mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use sigmalab::harness::{
    grid_sweep, read_jsonl_values, save_jsonl, ExperimentConfig, ExperimentResult, Grid, RunStatus,
    SUMMARY_HEADER,
};
use sigmalab::transformer::save_checkpoint;
use sigmalab::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(
    name = "sigmalab",
    version,
    about = "Attention entropy collapse laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Bound,
    Prop32,
    Power,
    Gradcheck,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Bound => Suite::Bound,
            SuiteArg::Prop32 => Suite::Prop32,
            SuiteArg::Power => Suite::Power,
            SuiteArg::Gradcheck => Suite::Gradcheck,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration; exits 2 if the run diverged.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every point of a parameter grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// JSON object mapping dotted config paths to lists of values.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a property suite and print a pass/fail table.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw metric streams as an SVG line chart.
    Plot {
        /// metrics.jsonl files.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Comma-separated dotted field paths, e.g. mean_entropy.0,sigma_kq.0.
        #[arg(long, value_delimiter = ',', required = true)]
        fields: Vec<String>,
        /// Fields drawn on a log scale.
        #[arg(long, value_delimiter = ',')]
        logy: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_run(dir: &Path, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), result.config.to_json()? + "\n")?;
    save_jsonl(&dir.join("metrics.jsonl"), &result.records)?;
    fs::write(
        dir.join("summary.csv"),
        format!("{SUMMARY_HEADER}\n{}\n", result.summary_row()),
    )?;
    save_checkpoint(&dir.join("checkpoint.bin"), &result.model)?;
    Ok(())
}

fn cmd_run(config: &Path, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let cfg = load_config(config, seed)?;
    eprintln!("running {} for {} steps", cfg.run_id, cfg.train.steps);
    let result = sigmalab::harness::run_experiment(&cfg)?;
    write_run(out, &result)?;
    println!("{SUMMARY_HEADER}");
    println!("{}", result.summary_row());
    eprintln!(
        "{} after {} steps; outputs in {}",
        result.status.as_str(),
        result.steps_run,
        out.display()
    );
    Ok(match result.status {
        RunStatus::Completed => ExitCode::SUCCESS,
        RunStatus::Diverged => ExitCode::from(2),
    })
}

fn cmd_sweep(
    config: &Path,
    grid: &Path,
    out: &Path,
    parallel: usize,
    seed: Option<u64>,
) -> Result<ExitCode> {
    let base = load_config(config, seed)?;
    let text = fs::read_to_string(grid).with_context(|| format!("reading {}", grid.display()))?;
    let grid: Grid = serde_json::from_str::<BTreeMap<String, Vec<Value>>>(&text)
        .with_context(|| format!("parsing {}; expected an object of lists", grid.display()))?;
    eprintln!(
        "sweeping {} grid points on {} threads",
        grid.values().map(Vec::len).product::<usize>(),
        parallel.max(1)
    );
    let results = grid_sweep(&base, &grid, parallel)?;
    fs::create_dir_all(out)?;
    let mut table = format!("{SUMMARY_HEADER}\n");
    for r in &results {
        write_run(&out.join(&r.run_id), r)?;
        table.push_str(&r.summary_row());
        table.push('\n');
    }
    fs::write(out.join("sweep_summary.csv"), &table)?;
    print!("{table}");
    let diverged = results
        .iter()
        .filter(|r| r.status == RunStatus::Diverged)
        .count();
    eprintln!(
        "{} runs, {diverged} diverged; outputs in {}",
        results.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(suite: Suite, seed: u64) -> Result<ExitCode> {
    let checks = run_suite(suite, seed)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        println!(
            "{} {:width$}  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    eprintln!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

/// Legend label: the run id from a sibling config.json, else the parent directory name.
fn series_label(path: &Path) -> String {
    let dir = path.parent().unwrap_or(Path::new("."));
    if let Ok(text) = fs::read_to_string(dir.join("config.json")) {
        if let Some(id) = serde_json::from_str::<Value>(&text)
            .ok()
            .and_then(|v| v.get("run_id").and_then(Value::as_str).map(str::to_owned))
        {
            return id;
        }
    }
    match path.file_stem().and_then(|s| s.to_str()) {
        Some("metrics") | None => dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("run")
            .to_string(),
        Some(stem) => stem.to_string(),
    }
}

fn cmd_plot(
    metrics: &[PathBuf],
    fields: &[String],
    logy: &[String],
    out: &Path,
) -> Result<ExitCode> {
    let mut series = Vec::with_capacity(metrics.len());
    for path in metrics {
        let records =
            read_jsonl_values(path).with_context(|| format!("reading {}", path.display()))?;
        if records.is_empty() {
            bail!("{} has no records", path.display());
        }
        series.push(plot::Series {
            label: series_label(path),
            records,
        });
    }
    let svg = plot::render_svg(&series, fields, logy)?;
    fs::write(out, svg).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // Usage errors exit 1; 2 is reserved for diverged runs.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Run { config, out, seed } => cmd_run(config, out, *seed),
        Command::Sweep {
            config,
            grid,
            out,
            parallel,
            seed,
        } => cmd_sweep(config, grid, out, *parallel, *seed),
        Command::Verify { suite, seed } => cmd_verify((*suite).into(), *seed),
        Command::Plot {
            metrics,
            fields,
            logy,
            out,
        } => cmd_plot(metrics, fields, logy, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
