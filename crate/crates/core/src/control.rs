//! Controllers producing the commanded ACC time-gap profile.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EquilibriumPoint, TrafficParams};
use crate::nn::Mlp;
use crate::scalar::Scalar;
use crate::sim::{InputProfile, TrafficState};

/// Three feedback gains applied uniformly over the road: previous-input, velocity and
/// density feedback.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainAction<T> {
    pub eta1: T,
    pub eta2: T,
    pub eta3: T,
}

impl<T: Scalar> GainAction<T> {
    pub fn new(eta1: T, eta2: T, eta3: T) -> Self {
        Self { eta1, eta2, eta3 }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.eta1.is_finite() && self.eta2.is_finite() && self.eta3.is_finite()
    }
}

/// Three-gain feedback law around the equilibrium, clamped to `[gap_min, gap_max]`:
///
/// `h_i = h_eq - eta1 (h_prev_i - h_eq) - eta2 (v_i - v_eq) + eta3 (rho_i - rho_eq)`.
///
/// Returns the profile and the number of nodes where the clamp was active.
pub fn gain_feedback<T: Scalar>(
    prev_input: &InputProfile<T>,
    state: &TrafficState<T>,
    eq: &EquilibriumPoint<T>,
    gains: &GainAction<T>,
    params: &TrafficParams<T>,
) -> Result<(InputProfile<T>, usize)> {
    let nodes = state.nodes();
    if prev_input.len() != nodes {
        return Err(Error::Shape {
            context: "prev_input",
            expected: nodes,
            got: prev_input.len(),
        });
    }
    let h_eq = params.gap_acc_eq;
    let mut clamps = 0;
    let out = prev_input
        .gaps()
        .iter()
        .zip(state.v.iter().zip(&state.rho))
        .map(|(&prev, (&v, &rho))| {
            let raw = h_eq - gains.eta1 * (prev - h_eq) - gains.eta2 * (v - eq.v) + gains.eta3 * (rho - eq.rho);
            let clamped = params.clamp_gap(raw);
            if clamped != raw {
                clamps += 1;
            }
            clamped
        })
        .collect();
    Ok((InputProfile(out), clamps))
}

/// Constant equilibrium time gap regardless of the state.
pub fn open_loop<T: Scalar>(state: &TrafficState<T>, params: &TrafficParams<T>) -> InputProfile<T> {
    InputProfile::constant(state.nodes(), params.gap_acc_eq)
}

/// Anything that maps the current state and previous command to a new command.
pub trait Controller<T> {
    /// Returns the commanded profile and the number of clamped nodes.
    fn command(
        &mut self,
        state: &TrafficState<T>,
        prev_input: &InputProfile<T>,
        params: &TrafficParams<T>,
        eq: &EquilibriumPoint<T>,
    ) -> Result<(InputProfile<T>, usize)>;

    fn name(&self) -> &'static str;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OpenLoop;

impl<T: Scalar> Controller<T> for OpenLoop {
    fn command(
        &mut self,
        state: &TrafficState<T>,
        _prev_input: &InputProfile<T>,
        params: &TrafficParams<T>,
        _eq: &EquilibriumPoint<T>,
    ) -> Result<(InputProfile<T>, usize)> {
        Ok((open_loop(state, params), 0))
    }

    fn name(&self) -> &'static str {
        "open_loop"
    }
}

/// The feedback law with gains held constant.
#[derive(Debug, Clone, Copy)]
pub struct FixedGain<T> {
    pub gains: GainAction<T>,
}

impl<T: Scalar> Controller<T> for FixedGain<T> {
    fn command(
        &mut self,
        state: &TrafficState<T>,
        prev_input: &InputProfile<T>,
        params: &TrafficParams<T>,
        eq: &EquilibriumPoint<T>,
    ) -> Result<(InputProfile<T>, usize)> {
        gain_feedback(prev_input, state, eq, &self.gains, params)
    }

    fn name(&self) -> &'static str {
        "fixed_gain"
    }
}

/// Affine map from the policy's normalized action in `[0, 1]^3` to the feedback gains.
///
/// Each component is clamped to `[0, 1]` and mapped to `[low_k, high_k]`. The identity map
/// (`low = 0`, `high = 1`) keeps the raw sigmoid range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainMap {
    pub low: [f64; 3],
    pub high: [f64; 3],
}

impl GainMap {
    pub fn identity() -> Self {
        Self {
            low: [0.0; 3],
            high: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if !(self.low[k].is_finite() && self.high[k].is_finite() && self.high[k] > self.low[k]) {
                return Err(Error::config(
                    format!("gain_map[{k}]"),
                    format!("need finite low < high, got [{}, {}]", self.low[k], self.high[k]),
                ));
            }
        }
        Ok(())
    }

    pub fn apply<T: Scalar>(&self, action: &[T; 3]) -> GainAction<T> {
        let g = |k: usize| {
            let a = action[k].max(T::zero()).min(T::one());
            T::lit(self.low[k]) + T::lit(self.high[k] - self.low[k]) * a
        };
        GainAction::new(g(0), g(1), g(2))
    }
}

impl Default for GainMap {
    fn default() -> Self {
        Self::identity()
    }
}

/// Block-normalized policy input: `[rho / rho_eq, v / v_eq, h_prev / h_eq]`.
pub fn encode_state<T: Scalar>(
    state: &TrafficState<T>,
    prev_input: &InputProfile<T>,
    eq: &EquilibriumPoint<T>,
    params: &TrafficParams<T>,
) -> Result<Vec<T>> {
    let nodes = state.nodes();
    if state.v.len() != nodes || prev_input.len() != nodes {
        return Err(Error::Shape {
            context: "encode_state",
            expected: nodes,
            got: state.v.len().min(prev_input.len()),
        });
    }
    let mut out = Vec::with_capacity(3 * nodes);
    out.extend(state.rho.iter().map(|&r| r / eq.rho));
    out.extend(state.v.iter().map(|&v| v / eq.v));
    out.extend(prev_input.gaps().iter().map(|&h| h / params.gap_acc_eq));
    Ok(out)
}

/// Output of the Gaussian policy head for one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutput<T> {
    pub mean: [T; 3],
    pub std: [T; 3],
}

/// Evaluates the actor on one encoded state.
pub fn policy_output<T: Scalar>(actor: &Mlp<T>, state_vector: &[T]) -> Result<PolicyOutput<T>> {
    let out = actor.forward_one(state_vector)?;
    if out.len() != 6 {
        return Err(Error::Shape {
            context: "actor output",
            expected: 6,
            got: out.len(),
        });
    }
    Ok(PolicyOutput {
        mean: [out[0], out[1], out[2]],
        std: [out[3], out[4], out[5]],
    })
}

/// Draws the normalized action: the mean in deterministic mode, otherwise one independent
/// Normal sample per component.
pub fn sample_action<T: Scalar, R: Rng + ?Sized>(
    policy: &PolicyOutput<T>,
    deterministic: bool,
    rng: &mut R,
) -> [T; 3] {
    if deterministic {
        return policy.mean;
    }
    let mut a = policy.mean;
    for (k, slot) in a.iter_mut().enumerate() {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        *slot = policy.mean[k] + policy.std[k] * T::lit(z);
    }
    a
}

/// Runs the actor on an encoded state and draws the normalized action in `[0, 1]^3` space
/// (unclamped; the gain map clamps).
pub fn ppo_policy_act<T: Scalar, R: Rng + ?Sized>(
    actor: &Mlp<T>,
    state_vector: &[T],
    deterministic: bool,
    rng: &mut R,
) -> Result<[T; 3]> {
    if state_vector.len() != actor.spec().input_dim() {
        return Err(Error::Shape {
            context: "state_vector",
            expected: actor.spec().input_dim(),
            got: state_vector.len(),
        });
    }
    let out = policy_output(actor, state_vector)?;
    Ok(sample_action(&out, deterministic, rng))
}

/// Policy-driven controller: the actor chooses gains from the encoded state each step.
///
/// The normalized action of the most recent step is kept in `last_action`.
pub struct PolicyController<T, R> {
    pub actor: Mlp<T>,
    pub gain_map: GainMap,
    pub deterministic: bool,
    pub rng: R,
    pub last_action: Option<[T; 3]>,
}

impl<T: Scalar, R: Rng> PolicyController<T, R> {
    pub fn new(actor: Mlp<T>, gain_map: GainMap, deterministic: bool, rng: R) -> Self {
        Self {
            actor,
            gain_map,
            deterministic,
            rng,
            last_action: None,
        }
    }
}

impl<T: Scalar, R: Rng> Controller<T> for PolicyController<T, R> {
    fn command(
        &mut self,
        state: &TrafficState<T>,
        prev_input: &InputProfile<T>,
        params: &TrafficParams<T>,
        eq: &EquilibriumPoint<T>,
    ) -> Result<(InputProfile<T>, usize)> {
        let encoded = encode_state(state, prev_input, eq, params)?;
        let action = ppo_policy_act(&self.actor, &encoded, self.deterministic, &mut self.rng)?;
        self.last_action = Some(action);
        let gains = self.gain_map.apply(&action);
        gain_feedback(prev_input, state, eq, &gains, params)
    }

    fn name(&self) -> &'static str {
        "ppo_policy"
    }
}
