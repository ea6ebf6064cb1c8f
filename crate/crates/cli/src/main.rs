//! `stopgo`: train, simulate, evaluate and sweep stop-and-go controllers.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stopgo::config::ScenarioConfig;
use stopgo::experiment::{self, EvaluateOptions};
use stopgo::ppo::PolicyCheckpoint;

/// Exit status of a training run that spent its budget without meeting the stop rule.
const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "stopgo", version, about = "Mixed ACC/manual freeway traffic with a PPO time-gap controller")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario config (TOML). Defaults apply when omitted; STOPGO_* variables override either.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy; writes checkpoint, learning curve and summary.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate the configured controller; writes trace and L2-norm CSVs.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Trained policy, required for controller = "ppo_policy".
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compute performance indices of every run under a directory against its open loop.
    Evaluate {
        /// Directory holding run directories (or a single run).
        trace_dir: PathBuf,
        /// Config supplying the fuel model and index window.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the robustness scenarios with one trained policy.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Parallel runs; defaults to the config's `sweep.workers`.
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> stopgo::Result<ScenarioConfig> {
    let mut cfg = match path {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::from_env()?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ScenarioConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

fn run(cli: Cli) -> stopgo::Result<ExitCode> {
    match cli.command {
        Command::Train { common } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let out = out_dir(&common, &cfg);
            let summary = experiment::run_train(&cfg, &out, &mut |row| {
                let eval = row.eval_mean_reward.map_or_else(|| "-".to_string(), |r| format!("{r:.5}"));
                eprintln!(
                    "episode {:>4}  update {:>5}  train {:.5}  eval {eval}",
                    row.episode, row.update_index, row.train_mean_reward
                );
            })?;
            println!("{}", serde_json::to_string(&summary)?);
            if summary.converged {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("budget of {} updates spent without meeting the stop rule", summary.updates);
                Ok(ExitCode::from(EXIT_NOT_CONVERGED))
            }
        }
        Command::Simulate { common, checkpoint } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let ckpt = checkpoint.as_deref().map(PolicyCheckpoint::load).transpose()?;
            let summary = experiment::run_simulate(&cfg, ckpt.as_ref(), &out_dir(&common, &cfg))?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { trace_dir, config } => {
            let cfg = load_config(config.as_deref(), None)?;
            let report = experiment::run_evaluate(&trace_dir, &EvaluateOptions::from_config(&cfg))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            common,
            checkpoint,
            workers,
        } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let ckpt = PolicyCheckpoint::load(&checkpoint)?;
            let workers = workers.unwrap_or(cfg.sweep.workers);
            let report = experiment::run_sweep(&cfg, &ckpt, &out_dir(&common, &cfg), workers)?;
            for e in &report.entries {
                match (&e.summary, &e.error) {
                    (Some(s), _) => {
                        let (r, v) = s.norm_ratios();
                        let status = if s.diverged.is_some() { "diverged" } else { "ok" };
                        eprintln!("{:<24} {status:<9} final/initial L2: rho {r:.4}, v {v:.4}", e.name);
                    }
                    (None, Some(err)) => eprintln!("{:<24} failed: {err}", e.name),
                    (None, None) => {}
                }
            }
            println!("{}", serde_json::to_string(&report)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
