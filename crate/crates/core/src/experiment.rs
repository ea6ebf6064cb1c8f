//! Run orchestration: training, closed-loop simulation, index evaluation and robustness
//! sweeps, each writing its artifacts into one run directory.
//!
//! Every run directory receives `config.resolved.toml`, the exact configuration after
//! defaults and environment overrides, so the run can be repeated bit for bit.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ControllerKind, ScenarioConfig};
use crate::control::{Controller, FixedGain, OpenLoop, PolicyController};
use crate::error::{Error, Result};
use crate::metrics::{self, FuelModel, IndicesReport, IndicesRow, NormSample};
use crate::model;
use crate::ppo::{self, Agent, EpisodeRow, PolicyCheckpoint, TrafficEnv, TrainOutcome};
use crate::sim::{simulate, AlphaNoise, Divergence, SimOptions, Trace, TraceCsvOptions};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CURVE_FILE: &str = "learning_curve.csv";
pub const EPISODES_FILE: &str = "episodes.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const NORMS_FILE: &str = "norms.csv";
pub const RUN_FILE: &str = "run.json";
pub const INDICES_FILE: &str = "indices.json";
pub const SWEEP_FILE: &str = "sweep.json";
pub const SWEEP_NORMS_FILE: &str = "sweep_norms.csv";
pub const SWEEP_NORMS_SCHEMA: &str = "# schema: stopgo.sweep_norms v1";

/// Seed offsets keep the streams of one run independent of each other.
const EVAL_ENV_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;
const FIRST_TRAIN_ENV_STREAM: u64 = 16;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_resolved_config(cfg: &ScenarioConfig, dir: &Path) -> Result<()> {
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

/// Training result without any file output.
pub struct Trained {
    pub checkpoint: PolicyCheckpoint,
    pub outcome: TrainOutcome<f64>,
}

/// Trains a policy on the plant with the assumed delay.
pub fn train_policy(cfg: &ScenarioConfig, on_episode: &mut dyn FnMut(&EpisodeRow)) -> Result<Trained> {
    cfg.validate()?;
    let params = cfg.params(cfg.delay_assumed);
    let grid = cfg.grid_for(cfg.delay_assumed)?;
    let make_env = |stream: u64| {
        TrafficEnv::new(
            params,
            grid,
            cfg.amplitude,
            cfg.gain_map(),
            cfg.alpha_noise(),
            cfg.seed.wrapping_add(stream),
        )
    };
    let mut envs = (0..cfg.ppo.parallel_envs as u64)
        .map(|k| make_env(FIRST_TRAIN_ENV_STREAM + k))
        .collect::<Result<Vec<_>>>()?;
    let mut eval_env = make_env(EVAL_ENV_STREAM)?;
    let agent = Agent::new(3 * grid.nodes(), &cfg.ppo, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SAMPLING_STREAM));
    let outcome = ppo::train(&mut envs, &mut eval_env, agent, &cfg.ppo, grid.dt, &mut rng, on_episode)?;
    let checkpoint = PolicyCheckpoint::from_agent(
        &outcome.agent,
        &cfg.ppo,
        grid.nodes(),
        grid.dx,
        grid.dt,
        cfg.delay_assumed,
        cfg.seed,
        outcome.updates,
        outcome.converged,
        outcome.final_reward,
    );
    Ok(Trained { checkpoint, outcome })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub name: String,
    pub seed: u64,
    pub delay_assumed: f64,
    pub converged: bool,
    pub updates: usize,
    pub episodes: usize,
    pub final_reward: Option<f64>,
}

/// Trains and writes the checkpoint, learning curve, per-episode rewards and summary.
pub fn run_train(cfg: &ScenarioConfig, out: &Path, on_episode: &mut dyn FnMut(&EpisodeRow)) -> Result<TrainSummary> {
    create_dir(out)?;
    write_resolved_config(cfg, out)?;
    let trained = train_policy(cfg, on_episode)?;
    trained.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    ppo::write_curve_csv(create_file(&out.join(CURVE_FILE))?, &trained.outcome.curve)?;
    ppo::write_episodes_csv(create_file(&out.join(EPISODES_FILE))?, &trained.outcome.episodes)?;
    let summary = TrainSummary {
        name: cfg.name.clone(),
        seed: cfg.seed,
        delay_assumed: cfg.delay_assumed,
        converged: trained.outcome.converged,
        updates: trained.outcome.updates,
        episodes: trained.outcome.episodes.len(),
        final_reward: trained.outcome.final_reward,
    };
    write_json(&out.join(TRAIN_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Plant-side settings of one simulation; the controller side comes from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantSetup {
    pub scenario: String,
    pub delay_actual: f64,
    pub alpha_noise: Option<AlphaNoise>,
}

impl PlantSetup {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        Self {
            scenario: cfg.name.clone(),
            delay_actual: cfg.delay_actual,
            alpha_noise: cfg.alpha_noise(),
        }
    }
}

/// What a simulation run reports next to its trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub controller: String,
    pub delay_actual: f64,
    pub delay_assumed: f64,
    pub alpha_noise: Option<AlphaNoise>,
    pub seed: u64,
    pub horizon_s: f64,
    pub steps_taken: usize,
    pub diverged: Option<Divergence>,
    pub clamp_events: usize,
    pub initial_rho_l2: f64,
    pub initial_v_l2: f64,
    pub final_rho_l2: f64,
    pub final_v_l2: f64,
    /// Largest per-step reward over the run.
    pub best_reward: f64,
    /// Whether any step reached the training stop reward.
    pub reached_stop_reward: bool,
}

impl RunSummary {
    /// Final-to-initial ratio of each L2 norm.
    pub fn norm_ratios(&self) -> (f64, f64) {
        (self.final_rho_l2 / self.initial_rho_l2, self.final_v_l2 / self.initial_v_l2)
    }
}

/// Closed-loop run of `controller` on the plant described by `plant`.
///
/// A policy controller acts on its mean action and requires a checkpoint whose grid and
/// assumed delay match the configuration.
pub fn simulate_scenario(
    cfg: &ScenarioConfig,
    controller: ControllerKind,
    checkpoint: Option<&PolicyCheckpoint>,
    plant: &PlantSetup,
) -> Result<(Trace<f64>, RunSummary)> {
    let params = cfg.params(plant.delay_actual);
    let grid = cfg.grid_for(plant.delay_actual)?;
    let mut ctrl: Box<dyn Controller<f64>> = match controller {
        ControllerKind::OpenLoop => Box::new(OpenLoop),
        ControllerKind::FixedGain => {
            let gains = cfg
                .fixed_gain
                .ok_or_else(|| Error::config("fixed_gain", "required when controller = \"fixed_gain\""))?;
            Box::new(FixedGain { gains: gains.gains() })
        }
        ControllerKind::PpoPolicy => {
            let ckpt = checkpoint.ok_or_else(|| Error::Missing("checkpoint for the ppo_policy controller".into()))?;
            ckpt.check_grid(grid.nodes(), grid.dx, grid.dt)?;
            if (ckpt.delay_assumed - cfg.delay_assumed).abs() > 1e-9 {
                return Err(Error::config(
                    "delay_assumed",
                    format!(
                        "config says {} s but the checkpoint was trained with {} s",
                        cfg.delay_assumed, ckpt.delay_assumed
                    ),
                ));
            }
            let agent: Agent<f64> = ckpt.agent()?;
            let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SAMPLING_STREAM));
            Box::new(PolicyController::new(agent.actor, agent.gain_map, true, rng))
        }
    };
    let options = SimOptions {
        amplitude: cfg.amplitude,
        alpha_noise: plant.alpha_noise,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let trace = simulate(ctrl.as_mut(), &params, &grid, &options, &mut rng)?;
    let eq = model::equilibrium(&params)?;
    let norms = metrics::norm_series(&trace, &eq);
    let first = norms.first().expect("trace holds the initial state");
    let last = norms.last().expect("trace holds the initial state");
    let best_reward = norms.iter().skip(1).map(|s| s.reward).fold(f64::NEG_INFINITY, f64::max);
    let summary = RunSummary {
        scenario: plant.scenario.clone(),
        controller: controller.name().to_string(),
        delay_actual: plant.delay_actual,
        delay_assumed: cfg.delay_assumed,
        alpha_noise: plant.alpha_noise,
        seed: cfg.seed,
        horizon_s: cfg.horizon,
        steps_taken: trace.len() - 1,
        diverged: trace.diverged.clone(),
        clamp_events: trace.clamp_events,
        initial_rho_l2: first.rho_l2,
        initial_v_l2: first.v_l2,
        final_rho_l2: last.rho_l2,
        final_v_l2: last.v_l2,
        best_reward,
        reached_stop_reward: cfg.ppo.stop_reward.is_some_and(|s| best_reward >= s),
    };
    Ok((trace, summary))
}

/// Writes trace, L2-norm series, summary and resolved config of one simulation.
pub fn write_run(cfg: &ScenarioConfig, trace: &Trace<f64>, summary: &RunSummary, dir: &Path) -> Result<Vec<NormSample>> {
    create_dir(dir)?;
    write_resolved_config(cfg, dir)?;
    let csv_options = TraceCsvOptions {
        time_stride: cfg.output.trace_time_stride,
        space_stride: cfg.output.trace_space_stride,
    };
    trace.write_csv(create_file(&dir.join(TRACE_FILE))?, &csv_options)?;
    let eq = model::equilibrium(&cfg.params(summary.delay_actual))?;
    let norms = metrics::norm_series(trace, &eq);
    metrics::write_norms_csv(create_file(&dir.join(NORMS_FILE))?, &norms)?;
    write_json(&dir.join(RUN_FILE), summary)?;
    Ok(norms)
}

/// `simulate` subcommand: one run of the configured controller on the configured plant.
pub fn run_simulate(cfg: &ScenarioConfig, checkpoint: Option<&PolicyCheckpoint>, out: &Path) -> Result<RunSummary> {
    let plant = PlantSetup::from_config(cfg);
    let (trace, summary) = simulate_scenario(cfg, cfg.controller, checkpoint, &plant)?;
    write_run(cfg, &trace, &summary, out)?;
    Ok(summary)
}

/// Index evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaluateOptions {
    pub fuel_model: FuelModel,
    /// Window in seconds; `None` integrates each full trace.
    pub window: Option<f64>,
}

impl EvaluateOptions {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        Self {
            fuel_model: cfg.fuel_model,
            window: cfg.index_window,
        }
    }
}

/// Run directories under `root` (itself and its direct children) holding a summary and trace.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let is_run = |d: &Path| d.join(RUN_FILE).is_file() && d.join(TRACE_FILE).is_file();
    let mut runs = Vec::new();
    if is_run(root) {
        runs.push(root.to_path_buf());
    }
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut children: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && is_run(p))
        .collect();
    children.sort();
    runs.extend(children);
    Ok(runs)
}

/// Computes indices for every run under `root` and the improvement over the open loop of the
/// same scenario (or the only open-loop run when scenarios differ). Writes `indices.json`.
pub fn run_evaluate(root: &Path, options: &EvaluateOptions) -> Result<IndicesReport> {
    let runs = find_runs(root)?;
    let mut scored = Vec::with_capacity(runs.len());
    for dir in &runs {
        let summary: RunSummary = read_json(&dir.join(RUN_FILE))?;
        let path = dir.join(TRACE_FILE);
        let trace = Trace::read_csv(File::open(&path).map_err(|e| Error::io(&path, e))?)?;
        let idx = metrics::indices(&trace, options.window, options.fuel_model)?;
        scored.push((summary, idx));
    }
    let baselines: Vec<_> = scored.iter().filter(|(s, _)| s.controller == "open_loop").collect();
    if baselines.is_empty() {
        return Err(Error::Missing(format!("open-loop baseline run under {}", root.display())));
    }
    let window = options.window.unwrap_or_else(|| scored.iter().map(|(_, i)| i.horizon).fold(0.0, f64::max));
    let mut report = IndicesReport::new(options.fuel_model, window);
    for (summary, idx) in &scored {
        let base = baselines
            .iter()
            .find(|(b, _)| b.scenario == summary.scenario)
            .or_else(|| (baselines.len() == 1).then(|| &baselines[0]))
            .ok_or_else(|| {
                Error::Missing(format!("open-loop baseline for scenario `{}`", summary.scenario))
            })?;
        report.rows.push(IndicesRow {
            scenario: summary.scenario.clone(),
            controller: summary.controller.clone(),
            j_ttt: idx.j_ttt,
            j_fuel: idx.j_fuel,
            j_comfort: idx.j_comfort,
            improvement_vs_open_loop_percent: idx.improvement_over(&base.1),
        });
    }
    write_json(&root.join(INDICES_FILE), &report)?;
    Ok(report)
}

/// Outcome of one sweep entry; failures are recorded and the sweep goes on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub name: String,
    pub dir: PathBuf,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub checkpoint_seed: u64,
    pub delay_assumed: f64,
    pub entries: Vec<SweepEntry>,
}

struct SweepJob {
    name: String,
    controller: ControllerKind,
    plant: PlantSetup,
}

/// Runs every configured robustness scenario with one checkpoint on up to `workers` threads.
///
/// Each run gets its own directory `out/<name>`; the L2-norm series of all runs that finished
/// are merged into `sweep_norms.csv`.
pub fn run_sweep(cfg: &ScenarioConfig, checkpoint: &PolicyCheckpoint, out: &Path, workers: usize) -> Result<SweepReport> {
    create_dir(out)?;
    write_resolved_config(cfg, out)?;
    let mut jobs = Vec::new();
    for s in &cfg.sweep.scenarios {
        let plant = PlantSetup {
            scenario: s.name.clone(),
            delay_actual: s.delay_actual,
            alpha_noise: s.alpha_noise.map(Into::into),
        };
        if cfg.sweep.include_open_loop {
            jobs.push(SweepJob {
                name: format!("{}_open_loop", s.name),
                controller: ControllerKind::OpenLoop,
                plant: plant.clone(),
            });
        }
        jobs.push(SweepJob {
            name: s.name.clone(),
            controller: ControllerKind::PpoPolicy,
            plant,
        });
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<(SweepEntry, Vec<NormSample>)>>> = Mutex::new(vec![None; jobs.len()]);
    let worker = || loop {
        let k = next.fetch_add(1, Ordering::Relaxed);
        let Some(job) = jobs.get(k) else { break };
        let dir = out.join(&job.name);
        let result = simulate_scenario(cfg, job.controller, Some(checkpoint), &job.plant)
            .and_then(|(trace, summary)| write_run(cfg, &trace, &summary, &dir).map(|norms| (summary, norms)));
        let (entry, norms) = match result {
            Ok((summary, norms)) => (
                SweepEntry {
                    name: job.name.clone(),
                    dir: dir.clone(),
                    summary: Some(summary),
                    error: None,
                },
                norms,
            ),
            Err(e) => (
                SweepEntry {
                    name: job.name.clone(),
                    dir: dir.clone(),
                    summary: None,
                    error: Some(e.to_string()),
                },
                Vec::new(),
            ),
        };
        results.lock().expect("no worker panics while holding the lock")[k] = Some((entry, norms));
    };
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(&worker);
        }
    });

    let finished: Vec<(SweepEntry, Vec<NormSample>)> = results
        .into_inner()
        .expect("workers have joined")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect();
    write_sweep_norms(&out.join(SWEEP_NORMS_FILE), &finished)?;
    let report = SweepReport {
        checkpoint_seed: checkpoint.seed,
        delay_assumed: checkpoint.delay_assumed,
        entries: finished.into_iter().map(|(e, _)| e).collect(),
    };
    write_json(&out.join(SWEEP_FILE), &report)?;
    Ok(report)
}

/// Wide CSV: `t` followed by `<run>_rho_l2` and `<run>_v_l2` columns; runs that ended early
/// leave their cells empty.
fn write_sweep_norms(path: &Path, runs: &[(SweepEntry, Vec<NormSample>)]) -> Result<()> {
    use std::io::Write;
    let mut out = create_file(path)?;
    writeln!(out, "{SWEEP_NORMS_SCHEMA}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(out);
    let ok: Vec<&(SweepEntry, Vec<NormSample>)> = runs.iter().filter(|(_, n)| !n.is_empty()).collect();
    let mut header = vec!["t".to_string()];
    for (e, _) in &ok {
        header.push(format!("{}_rho_l2", e.name));
        header.push(format!("{}_v_l2", e.name));
    }
    w.write_record(&header)?;
    let rows = ok.iter().map(|(_, n)| n.len()).max().unwrap_or(0);
    for k in 0..rows {
        let t = ok.iter().find_map(|(_, n)| n.get(k)).map_or(0.0, |s| s.t);
        let mut record = vec![t.to_string()];
        for (_, n) in &ok {
            match n.get(k) {
                Some(s) => {
                    record.push(s.rho_l2.to_string());
                    record.push(s.v_l2.to_string());
                }
                None => record.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
