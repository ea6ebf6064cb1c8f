use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trainer::{Agent, PpoHyper};
use crate::control::GainMap;
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpSnapshot};
use crate::scalar::Scalar;

pub const POLICY_CHECKPOINT_VERSION: u32 = 1;

/// Trained agent plus everything needed to check it against a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCheckpoint {
    pub version: u32,
    pub nodes: usize,
    pub dx: f64,
    pub dt: f64,
    /// Input delay the policy was trained with (s).
    pub delay_assumed: f64,
    pub seed: u64,
    pub updates: usize,
    pub converged: bool,
    pub final_reward: Option<f64>,
    pub gain_map: GainMap,
    pub hyper: PpoHyper,
    pub actor: MlpSnapshot,
    pub critic: MlpSnapshot,
}

impl PolicyCheckpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn from_agent<T: Scalar>(
        agent: &Agent<T>,
        hyper: &PpoHyper,
        nodes: usize,
        dx: f64,
        dt: f64,
        delay_assumed: f64,
        seed: u64,
        updates: usize,
        converged: bool,
        final_reward: Option<f64>,
    ) -> Self {
        Self {
            version: POLICY_CHECKPOINT_VERSION,
            nodes,
            dx,
            dt,
            delay_assumed,
            seed,
            updates,
            converged,
            final_reward,
            gain_map: agent.gain_map,
            hyper: hyper.clone(),
            actor: agent.actor.snapshot(),
            critic: agent.critic.snapshot(),
        }
    }

    pub fn agent<T: Scalar>(&self) -> Result<Agent<T>> {
        Ok(Agent {
            actor: Mlp::from_snapshot(&self.actor)?,
            critic: Mlp::from_snapshot(&self.critic)?,
            gain_map: self.gain_map,
        })
    }

    /// Rejects a checkpoint whose networks or grid do not fit a scenario with `nodes` nodes
    /// spaced `dx` and stepped by `dt`.
    pub fn check_grid(&self, nodes: usize, dx: f64, dt: f64) -> Result<()> {
        let input = 3 * nodes;
        if self.actor.spec.input_dim() != input || self.critic.spec.input_dim() != input || self.nodes != nodes {
            return Err(Error::Checkpoint(format!(
                "checkpoint expects {} nodes (actor input {}), scenario has {nodes}",
                self.nodes,
                self.actor.spec.input_dim()
            )));
        }
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs());
        if !close(self.dx, dx) || !close(self.dt, dt) {
            return Err(Error::Checkpoint(format!(
                "checkpoint grid dx = {}, dt = {} differs from scenario dx = {dx}, dt = {dt}",
                self.dx, self.dt
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)?;
        if ckpt.version != POLICY_CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {POLICY_CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        if ckpt.actor.spec.output_dim() != 6 || ckpt.critic.spec.output_dim() != 1 {
            return Err(Error::Checkpoint("actor must emit 6 outputs and critic 1".into()));
        }
        Ok(ckpt)
    }
}
