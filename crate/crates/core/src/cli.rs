//! Command-line entry points.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objectives::{ObjectiveFamily, ReplayMode};
use crate::policy::load_checkpoint;
use crate::rollout::write_rollouts_jsonl;
use crate::trainer::{run_experiment, stream_rng, RunSummary, TrainConfig, Trainer};
use crate::verification::{run_suites, Suite, VerifyOptions};

/// Environment variable overriding the worker-thread count.
pub const WORKERS_ENV: &str = "MOE_RL_LAB_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "moe-rl-lab", version, about = "Token-level surrogate RL on a tiny MoE policy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Exit nonzero when the run is flagged as collapsed.
        #[arg(long)]
        strict: bool,
    },
    /// Run the oracle suites.
    Verify {
        /// autodiff, enumeration, order-study, replay-identity or all.
        #[arg(default_value = "all")]
        suite: String,
        /// Also write the report as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Flips the sign of one backward rule (mutation testing).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Run one experiment per value of an axis and compare them.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write one rollout batch as JSON lines.
    DumpRollouts {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Parameters to sample from; defaults to the config's initial policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    #[value(name = "N")]
    N,
    Replay,
    Objective,
    MantissaBits,
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            strict,
        } => cmd_train(&config, &out, seed, strict),
        Command::Verify {
            suite,
            out,
            seed,
            inject_fault,
        } => cmd_verify(&suite, out.as_deref(), seed, inject_fault),
        Command::Sweep {
            config,
            out,
            axis,
            values,
            seed,
        } => cmd_sweep(&config, &out, axis, &values, seed),
        Command::DumpRollouts {
            config,
            out,
            checkpoint,
            seed,
        } => cmd_dump_rollouts(&config, &out, checkpoint.as_deref(), seed),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config = TrainConfig::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn print_summary(summary: &RunSummary) {
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "steps {}  updates {}  initial reward {}  peak reward {}  final reward {}",
        summary.steps,
        summary.updates,
        fmt(summary.initial_reward),
        fmt(summary.peak_reward),
        fmt(summary.final_reward)
    );
    match summary.steps_to_threshold {
        Some(s) => println!("reward {} reached at step {s}", summary.reward_threshold),
        None => println!("reward {} not reached", summary.reward_threshold),
    }
    if let Some(reason) = &summary.collapse_reason {
        println!("collapse flagged at step {}: {reason}", summary.collapse_step.unwrap_or(0));
    }
}

pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>, strict: bool) -> Result<i32> {
    let config = load_config(config, seed)?;
    let summary = run_experiment(&config, out)?;
    print_summary(&summary);
    Ok(if strict && summary.collapsed { 2 } else { 0 })
}

pub fn cmd_verify(suite: &str, out: Option<&Path>, seed: Option<u64>, inject_fault: bool) -> Result<i32> {
    let suites = Suite::parse_selector(suite)?;
    let options = VerifyOptions {
        seed: seed.unwrap_or(VerifyOptions::default().seed),
        inject_fault,
    };
    let report = run_suites(&suites, &options)?;
    print!("{}", report.render());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("verify.json");
        let text = serde_json::to_string_pretty(&report).expect("report serialises");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(if report.passed() { 0 } else { 1 })
}

#[derive(Debug, Serialize)]
struct SweepRow {
    value: String,
    out_dir: PathBuf,
    summary: RunSummary,
}

fn apply_axis(config: &mut TrainConfig, axis: SweepAxis, value: &str) -> Result<()> {
    let bad = || Error::InvalidArgument(format!("invalid value `{value}` for axis {axis:?}"));
    match axis {
        SweepAxis::N => config.rollout.minibatches = value.parse().map_err(|_| bad())?,
        SweepAxis::MantissaBits => config.engine.mantissa_bits = value.parse().map_err(|_| bad())?,
        SweepAxis::Replay => {
            config.objective.replay = match value.to_ascii_lowercase().as_str() {
                "none" => ReplayMode::None,
                "r2" => ReplayMode::R2,
                "r3" => ReplayMode::R3,
                _ => return Err(bad()),
            }
        }
        SweepAxis::Objective => {
            config.objective.family = match value.to_ascii_lowercase().as_str() {
                "minirl" => ObjectiveFamily::Minirl,
                "grpo" => ObjectiveFamily::Grpo,
                "cispo" => ObjectiveFamily::Cispo,
                _ => return Err(bad()),
            }
        }
    }
    config.validate()
}

pub fn cmd_sweep(
    config: &Path,
    out: &Path,
    axis: SweepAxis,
    values: &[String],
    seed: Option<u64>,
) -> Result<i32> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let base = load_config(config, seed)?;
    // validate every value before running anything
    let configs: Vec<TrainConfig> = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            apply_axis(&mut c, axis, v)?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, config) in values.iter().zip(&configs) {
        let dir = out.join(format!("{}", value).replace('/', "_"));
        println!("== {value}");
        let summary = run_experiment(config, &dir)?;
        print_summary(&summary);
        rows.push(SweepRow {
            value: value.clone(),
            out_dir: dir,
            summary,
        });
    }

    let mut table = String::new();
    let _ = writeln!(table, "{:<10} {:>8} {:>8} {:>8} {:>10} {:>9}", "value", "initial", "peak", "final", "threshold", "collapse");
    for row in &rows {
        let s = &row.summary;
        let f = |x: Option<f64>| x.map_or("-".into(), |v| format!("{v:.3}"));
        let _ = writeln!(
            table,
            "{:<10} {:>8} {:>8} {:>8} {:>10} {:>9}",
            row.value,
            f(s.initial_reward),
            f(s.peak_reward),
            f(s.final_reward),
            s.steps_to_threshold.map_or("-".into(), |v| v.to_string()),
            s.collapse_step.map_or("-".into(), |v| v.to_string()),
        );
    }
    print!("{table}");
    let path = out.join("sweep_summary.json");
    let text = serde_json::to_string_pretty(&rows).expect("rows serialise");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    let path = out.join("sweep_summary.txt");
    std::fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    Ok(0)
}

pub fn cmd_dump_rollouts(
    config: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
    seed: Option<u64>,
) -> Result<i32> {
    let config = load_config(config, seed)?;
    let mut trainer = Trainer::new(config)?;
    if let Some(path) = checkpoint {
        let params = load_checkpoint(path)?;
        if params.config != trainer.params.config {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "checkpoint architecture differs from the config".into(),
            });
        }
        trainer.params = params;
    }
    let mut rng = stream_rng(trainer.config.seed, u64::MAX);
    let batch = trainer.rollouts(&mut rng)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("rollouts.jsonl");
    write_rollouts_jsonl(&path, &batch.records)?;
    println!("{} records, mean reward {:.4} -> {}", batch.records.len(), batch.mean_reward(), path.display());
    Ok(0)
}
