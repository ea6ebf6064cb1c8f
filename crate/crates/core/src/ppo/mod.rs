//! Proximal policy optimization of the three-gain controller.

mod checkpoint;
mod env;
pub mod math;
mod trainer;

use std::io::Write;

pub use checkpoint::{PolicyCheckpoint, POLICY_CHECKPOINT_VERSION};
pub use env::{Env, EnvStep, StepEnd, TrafficEnv};
pub use math::{
    actor_loss_and_grad, advantages, clipped_objective, constant_tail, critic_loss, critic_loss_and_grad,
    discounted_returns, discounted_returns_with_tail, gaussian_log_prob, ActorEval, BatchTensors,
};
pub use trainer::{
    collect_batch, evaluate_policy, finish_batch, finish_batches, ratios, train, update, Agent, CurveRow, EpisodeRow, EpisodeTracker,
    PpoHyper, StopOn, TrainOutcome, Trajectory, Transition, UpdateStats,
};

pub use crate::control::encode_state;
pub use crate::metrics::reward;

use crate::error::{Error, Result};

pub const CURVE_SCHEMA: &str = "# schema: stopgo.curve v1";
pub const EPISODES_SCHEMA: &str = "# schema: stopgo.episodes v1";

fn write_rows<W: Write, S: serde::Serialize>(mut out: W, schema: &str, rows: &[S]) -> Result<()> {
    writeln!(out, "{schema}").map_err(|e| Error::io("<csv>", e))?;
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Learning curve: one row per policy update.
pub fn write_curve_csv<W: Write>(out: W, rows: &[CurveRow]) -> Result<()> {
    write_rows(out, CURVE_SCHEMA, rows)
}

/// One row per completed training episode with the stop-rule reward.
pub fn write_episodes_csv<W: Write>(out: W, rows: &[EpisodeRow]) -> Result<()> {
    write_rows(out, EPISODES_SCHEMA, rows)
}
