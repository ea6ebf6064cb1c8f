//! Scenario configuration: a TOML file with every model, grid, controller and training knob.
//!
//! Unknown keys are rejected. Any key can be overridden from the environment with the
//! `STOPGO_` prefix, nesting tables with a double underscore: `STOPGO_SEED=3`,
//! `STOPGO_PPO__ACTOR_LR=3e-4`, `STOPGO_GRID__DT=0.05`. Override values are parsed as TOML
//! values and fall back to plain strings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::{GainAction, GainMap};
use crate::error::{Error, Result};
use crate::metrics::FuelModel;
use crate::model::{self, TrafficParams};
use crate::ppo::PpoHyper;
use crate::sim::{make_grid, AlphaNoise, Grid};

pub const ENV_PREFIX: &str = "STOPGO_";

/// Traffic constants; the input delay is set per run from `delay_actual` or `delay_assumed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficSection {
    pub road_length: f64,
    pub vehicle_length: f64,
    /// veh/s.
    pub inflow: f64,
    pub acc_ratio: f64,
    pub tau_acc: f64,
    pub tau_manual: f64,
    pub gap_manual: f64,
    pub gap_acc_eq: f64,
    pub free_flow_speed: f64,
    pub gap_min: f64,
    pub gap_max: f64,
}

impl Default for TrafficSection {
    fn default() -> Self {
        let p = TrafficParams::<f64>::reference();
        Self {
            road_length: p.road_length,
            vehicle_length: p.vehicle_length,
            inflow: p.inflow,
            acc_ratio: p.acc_ratio,
            tau_acc: p.tau_acc,
            tau_manual: p.tau_manual,
            gap_manual: p.gap_manual,
            gap_acc_eq: p.gap_acc_eq,
            free_flow_speed: p.free_flow_speed,
            gap_min: p.gap_min,
            gap_max: p.gap_max,
        }
    }
}

impl TrafficSection {
    pub fn params(&self, delay: f64) -> TrafficParams<f64> {
        TrafficParams {
            road_length: self.road_length,
            vehicle_length: self.vehicle_length,
            inflow: self.inflow,
            acc_ratio: self.acc_ratio,
            tau_acc: self.tau_acc,
            tau_manual: self.tau_manual,
            gap_manual: self.gap_manual,
            gap_acc_eq: self.gap_acc_eq,
            free_flow_speed: self.free_flow_speed,
            input_delay: delay,
            gap_min: self.gap_min,
            gap_max: self.gap_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// m.
    pub dx: f64,
    /// s.
    pub dt: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { dx: 5.0, dt: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    OpenLoop,
    FixedGain,
    #[default]
    PpoPolicy,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::OpenLoop => "open_loop",
            ControllerKind::FixedGain => "fixed_gain",
            ControllerKind::PpoPolicy => "ppo_policy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedGainSection {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
}

impl FixedGainSection {
    pub fn gains(&self) -> GainAction<f64> {
        GainAction::new(self.eta1, self.eta2, self.eta3)
    }
}

/// Gaussian perturbation of the ACC penetration ratio, clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub mean: f64,
    pub std: f64,
    #[serde(default = "default_true")]
    pub per_step: bool,
}

fn default_true() -> bool {
    true
}

impl From<NoiseSection> for AlphaNoise {
    fn from(n: NoiseSection) -> Self {
        AlphaNoise {
            mean: n.mean,
            std: n.std,
            per_step: n.per_step,
        }
    }
}

/// One robustness run: plant delay and penetration noise; the policy is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepScenario {
    pub name: String,
    pub delay_actual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_noise: Option<NoiseSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub workers: usize,
    /// Also simulate the open loop for each scenario as the comparison baseline.
    pub include_open_loop: bool,
    pub scenarios: Vec<SweepScenario>,
}

impl Default for SweepSection {
    fn default() -> Self {
        let noise = NoiseSection {
            mean: 0.15,
            std: 0.15,
            per_step: true,
        };
        let s = |name: &str, delay: f64, alpha_noise| SweepScenario {
            name: name.into(),
            delay_actual: delay,
            alpha_noise,
        };
        Self {
            workers: 1,
            include_open_loop: false,
            scenarios: vec![
                s("nominal", 4.0, None),
                s("delay_3s", 3.0, None),
                s("delay_5s", 5.0, None),
                s("alpha_noise", 4.0, Some(noise)),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Keep every `trace_time_stride`-th snapshot in trace CSVs.
    pub trace_time_stride: usize,
    pub trace_space_stride: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            trace_time_stride: 1,
            trace_space_stride: 1,
        }
    }
}

/// Everything one run needs. Defaults reproduce the reference freeway with a 4 s delay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// Simulated horizon of one run or training episode (s).
    pub horizon: f64,
    /// Cosine amplitude of the initial density perturbation (veh/m).
    pub amplitude: f64,
    /// Delay of the plant (s).
    pub delay_actual: f64,
    /// Delay the policy is trained with (s).
    pub delay_assumed: f64,
    pub controller: ControllerKind,
    pub out_dir: PathBuf,
    pub fuel_model: FuelModel,
    /// Evaluation window of the performance indices (s); `None` uses the whole trace.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index_window: Option<f64>,
    pub traffic: TrafficSection,
    pub grid: GridSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_noise: Option<NoiseSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_gain: Option<FixedGainSection>,
    pub ppo: PpoHyper,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 0,
            horizon: 300.0,
            amplitude: 0.01,
            delay_actual: 4.0,
            delay_assumed: 4.0,
            controller: ControllerKind::PpoPolicy,
            out_dir: PathBuf::from("runs"),
            fuel_model: FuelModel::Paper,
            index_window: None,
            traffic: TrafficSection::default(),
            grid: GridSection::default(),
            alpha_noise: None,
            fixed_gain: None,
            ppo: PpoHyper::default(),
            sweep: SweepSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl ScenarioConfig {
    /// Parses TOML text without environment overrides, then validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse()?;
        Self::from_table(table)
    }

    /// Reads `path`, applies `STOPGO_*` overrides from the process environment, validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: toml::Table = text.parse()?;
        apply_overrides(&mut table, std::env::vars())?;
        Self::from_table(table)
    }

    /// Defaults with `STOPGO_*` overrides, for runs without a config file.
    pub fn from_env() -> Result<Self> {
        let mut table = toml::Table::new();
        apply_overrides(&mut table, std::env::vars())?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            Error::config("<config>", e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    /// Checks ranges, divisibility of road and delays by the grid, and controller tables.
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.horizon) {
            return Err(Error::config("horizon", "must be positive"));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::config("amplitude", "must be nonnegative"));
        }
        for (field, d) in [("delay_actual", self.delay_actual), ("delay_assumed", self.delay_assumed)] {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::config(field, "must be nonnegative"));
            }
        }
        if let Some(w) = self.index_window {
            if !positive(w) || w > self.horizon + 1e-9 {
                return Err(Error::config("index_window", "must be positive and not exceed the horizon"));
            }
        }
        self.params(self.delay_actual)
            .validate()
            .map_err(|e| match e {
                Error::Domain { what, value } => {
                    Error::config(format!("traffic.{what}"), format!("out of range: {value}"))
                }
                other => other,
            })?;
        model::equilibrium(&self.params(0.0)).map_err(|e| Error::config("traffic", e.to_string()))?;
        for (field, d) in [("delay_actual", self.delay_actual), ("delay_assumed", self.delay_assumed)] {
            self.grid_for(d).map_err(|e| qualify_grid_error(e, field))?;
        }
        for s in &self.sweep.scenarios {
            self.grid_for(s.delay_actual)
                .map_err(|e| qualify_grid_error(e, &format!("sweep.scenarios.{}.delay_actual", s.name)))?;
            if let Some(n) = &s.alpha_noise {
                check_noise(n, &format!("sweep.scenarios.{}.alpha_noise", s.name))?;
            }
        }
        if let Some(n) = &self.alpha_noise {
            check_noise(n, "alpha_noise")?;
        }
        if self.controller == ControllerKind::FixedGain && self.fixed_gain.is_none() {
            return Err(Error::config("fixed_gain", "required when controller = \"fixed_gain\""));
        }
        if self.sweep.workers == 0 {
            return Err(Error::config("sweep.workers", "must be positive"));
        }
        if self.output.trace_time_stride == 0 || self.output.trace_space_stride == 0 {
            return Err(Error::config("output", "trace strides must be positive"));
        }
        self.ppo.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("ppo.{field}"), message),
            other => other,
        })
    }

    pub fn params(&self, delay: f64) -> TrafficParams<f64> {
        self.traffic.params(delay)
    }

    /// Grid over `horizon` for a plant with input delay `delay`.
    pub fn grid_for(&self, delay: f64) -> Result<Grid<f64>> {
        make_grid(&self.params(delay), self.grid.dx, self.grid.dt, self.horizon, 0.0)
    }

    pub fn alpha_noise(&self) -> Option<AlphaNoise> {
        self.alpha_noise.map(Into::into)
    }

    pub fn gain_map(&self) -> GainMap {
        self.ppo.gain_map
    }
}

fn check_noise(n: &NoiseSection, field: &str) -> Result<()> {
    if !(n.mean.is_finite() && n.std >= 0.0 && n.std.is_finite()) {
        return Err(Error::config(field, "need finite mean and nonnegative std"));
    }
    Ok(())
}

fn qualify_grid_error(e: Error, context: &str) -> Error {
    match e {
        Error::Config { field, message } => Error::config(format!("grid.{field}"), format!("{message} ({context})")),
        other => other,
    }
}

/// Writes `STOPGO_*` variables into `table`. Keys are lower-cased; `__` descends one table.
pub fn apply_overrides<I>(table: &mut toml::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::config(key, "malformed override key"));
        }
        let value = parse_value(&raw);
        let (leaf, parents) = path.split_last().expect("split yields at least one segment");
        let mut cursor = &mut *table;
        for seg in parents {
            let entry = cursor
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cursor = entry
                .as_table_mut()
                .ok_or_else(|| Error::config(key.clone(), format!("`{seg}` is not a table")))?;
        }
        cursor.insert(leaf.clone(), value);
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
