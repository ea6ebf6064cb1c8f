//! Explicit first-order upwind solver for the mixed-traffic PDE system with input delay.
//!
//! Interior nodes use the non-conservative form: density transport is upwinded by the
//! sign of `lambda1 = v`, velocity transport by the sign of `lambda2 = v + rho dV/drho`.
//! The relaxation source is applied explicitly.

mod delay;
mod grid;
mod trace;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use delay::DelayBuffer;
pub use grid::{make_grid, Grid};
pub use trace::{Divergence, DivergenceKind, Trace, TraceCsvOptions};

use crate::control::Controller;
use crate::error::{Error, Result};
use crate::model::{self, EquilibriumPoint, TrafficParams};
use crate::scalar::Scalar;

/// Density and velocity profiles on the `M + 1` grid nodes at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficState<T> {
    pub rho: Vec<T>,
    pub v: Vec<T>,
    pub t: T,
}

impl<T: Scalar> TrafficState<T> {
    pub fn uniform(nodes: usize, rho: T, v: T) -> Self {
        Self {
            rho: vec![rho; nodes],
            v: vec![v; nodes],
            t: T::zero(),
        }
    }

    #[inline]
    pub fn nodes(&self) -> usize {
        self.rho.len()
    }

    /// First node violating `0 < rho < 1/l`, `v > 0`, or finiteness.
    pub fn find_violation(&self, params: &TrafficParams<T>) -> Option<usize> {
        let jam = params.jam_density();
        self.rho.iter().zip(&self.v).position(|(&r, &v)| {
            !(r > T::zero() && r < jam && v > T::zero() && r.is_finite() && v.is_finite())
        })
    }

    pub fn max_deviation(&self, other: &Self) -> T {
        self.rho
            .iter()
            .zip(&other.rho)
            .chain(self.v.iter().zip(&other.v))
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Per-node commanded or applied ACC time gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputProfile<T>(pub Vec<T>);

impl<T: Scalar> InputProfile<T> {
    pub fn constant(nodes: usize, gap: T) -> Self {
        Self(vec![gap; nodes])
    }

    #[inline]
    pub fn gaps(&self) -> &[T] {
        &self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn within_bounds(&self, params: &TrafficParams<T>) -> bool {
        self.0
            .iter()
            .all(|&h| h >= params.gap_min && h <= params.gap_max)
    }
}

/// Stop-and-go initial condition: equilibrium density plus a four-period cosine,
/// with velocity chosen so the flux equals the inflow everywhere.
pub fn initial_state<T: Scalar>(
    params: &TrafficParams<T>,
    eq: &EquilibriumPoint<T>,
    grid: &Grid<T>,
    amplitude: T,
) -> Result<TrafficState<T>> {
    let nodes = grid.nodes();
    let mut rho = Vec::with_capacity(nodes);
    let mut v = Vec::with_capacity(nodes);
    let omega = T::lit(8.0 * PI) / params.road_length;
    for i in 0..nodes {
        let r = eq.rho + amplitude * (omega * grid.x(i)).cos();
        rho.push(r);
        v.push(params.inflow / r);
    }
    let state = TrafficState {
        rho,
        v,
        t: T::zero(),
    };
    if let Some(node) = state.find_violation(params) {
        return Err(Error::Positivity {
            step: 0,
            node,
            rho: state.rho[node].as_f64(),
            v: state.v[node].as_f64(),
        });
    }
    Ok(state)
}

/// Largest `max(|lambda1|, |lambda2|)` over the nodes for the given applied input.
pub fn max_char_speed<T: Scalar>(
    state: &TrafficState<T>,
    input: &InputProfile<T>,
    params: &TrafficParams<T>,
) -> Result<T> {
    let mut worst = T::zero();
    for ((&r, &v), &h) in state.rho.iter().zip(&state.v).zip(input.gaps()) {
        let (l1, l2) = model::char_speeds(r, v, h, params)?;
        worst = worst.max(l1.abs()).max(l2.abs());
    }
    Ok(worst)
}

fn check_shapes<T>(state: &TrafficState<T>, input: &InputProfile<T>, grid: &Grid<T>) -> Result<()>
where
    T: Scalar,
{
    let nodes = grid.nodes();
    for (context, got) in [
        ("state.rho", state.rho.len()),
        ("state.v", state.v.len()),
        ("input", input.len()),
    ] {
        if got != nodes {
            return Err(Error::Shape {
                context,
                expected: nodes,
                got,
            });
        }
    }
    Ok(())
}

/// Advances the state by one time step with the (already delayed) input applied.
///
/// `step_index` is only used to label errors.
pub fn step<T: Scalar>(
    state: &TrafficState<T>,
    delayed_input: &InputProfile<T>,
    params: &TrafficParams<T>,
    grid: &Grid<T>,
    step_index: usize,
) -> Result<TrafficState<T>> {
    check_shapes(state, delayed_input, grid)?;
    let limit = grid.speed_limit();
    let max_speed = max_char_speed(state, delayed_input, params)?;
    if !(max_speed <= limit) {
        return Err(Error::Cfl {
            step: step_index,
            max_speed: max_speed.as_f64(),
            limit: limit.as_f64(),
        });
    }

    let tau = model::tau_mix(params.acc_ratio, params.tau_acc, params.tau_manual)?;
    let (dt, dx) = (grid.dt, grid.dx);
    let m = grid.cells;
    let rho = &state.rho;
    let v = &state.v;
    let h = delayed_input.gaps();

    let mut next_rho = rho.clone();
    let mut next_v = v.clone();
    for i in 1..m {
        let (r, u) = (rho[i], v[i]);
        let slope = model::dv_mix_drho(r, h[i], params)?;
        let lambda2 = u + r * slope;

        let (drho, dv1) = if u >= T::zero() {
            ((r - rho[i - 1]) / dx, (u - v[i - 1]) / dx)
        } else {
            ((rho[i + 1] - r) / dx, (v[i + 1] - u) / dx)
        };
        next_rho[i] = r - dt * (u * drho + r * dv1);

        let dv2 = if lambda2 >= T::zero() {
            (u - v[i - 1]) / dx
        } else {
            (v[i + 1] - u) / dx
        };
        let relax = (model::v_mix(r, h[i], params)? - u) / tau;
        next_v[i] = u - dt * lambda2 * dv2 + dt * relax;
    }

    let mut next = TrafficState {
        rho: next_rho,
        v: next_v,
        t: state.t + dt,
    };
    apply_boundaries(state, &mut next, delayed_input, params, grid, tau)?;

    if let Some(node) = next.find_violation(params) {
        return Err(Error::Positivity {
            step: step_index,
            node,
            rho: next.rho[node].as_f64(),
            v: next.v[node].as_f64(),
        });
    }
    Ok(next)
}

/// Fills the boundary nodes of `next` from its updated interior.
///
/// Density is copied from the nearest interior node at both ends. Upstream velocity
/// enforces the inflow `v = q_in / rho`; downstream velocity relaxes toward `V_mix`
/// with an explicit Euler step from the previous state.
pub fn apply_boundaries<T: Scalar>(
    prev: &TrafficState<T>,
    next: &mut TrafficState<T>,
    delayed_input: &InputProfile<T>,
    params: &TrafficParams<T>,
    grid: &Grid<T>,
    tau: T,
) -> Result<()> {
    let m = grid.cells;
    next.rho[0] = next.rho[1];
    // A non-positive density here yields a non-positive or infinite speed, caught by the caller.
    next.v[0] = params.inflow / next.rho[0];

    let h_end = delayed_input.gaps()[m];
    let target = model::v_mix(prev.rho[m], h_end, params)?;
    next.v[m] = prev.v[m] + grid.dt * (target - prev.v[m]) / tau;
    next.rho[m] = next.rho[m - 1];
    Ok(())
}

/// Random perturbation of the ACC penetration ratio used in robustness runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaNoise {
    pub mean: f64,
    pub std: f64,
    /// Resample every step (`true`) or once per run.
    pub per_step: bool,
}

impl AlphaNoise {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let draw = if self.std > 0.0 {
            Normal::new(self.mean, self.std)
                .expect("finite positive std")
                .sample(rng)
        } else {
            self.mean
        };
        draw.clamp(0.0, 1.0)
    }
}

/// Plant with its delay line: owns the current state, the last command, and the step counter.
#[derive(Debug, Clone)]
pub struct Simulator<T> {
    pub params: TrafficParams<T>,
    pub grid: Grid<T>,
    pub eq: EquilibriumPoint<T>,
    state: TrafficState<T>,
    buffer: DelayBuffer<T>,
    prev_command: InputProfile<T>,
    step_index: usize,
}

/// What one call to [`Simulator::advance`] applied.
#[derive(Debug, Clone)]
pub struct Applied<T> {
    pub commanded: InputProfile<T>,
    pub applied: InputProfile<T>,
}

impl<T: Scalar> Simulator<T> {
    /// Starts from the stop-and-go initial condition with cosine amplitude `amplitude` (veh/m).
    pub fn new(params: TrafficParams<T>, grid: Grid<T>, amplitude: T) -> Result<Self> {
        params.validate()?;
        let eq = model::equilibrium(&params)?;
        let state = initial_state(&params, &eq, &grid, amplitude)?;
        Ok(Self::from_state(params, grid, eq, state))
    }

    pub fn from_state(
        params: TrafficParams<T>,
        grid: Grid<T>,
        eq: EquilibriumPoint<T>,
        state: TrafficState<T>,
    ) -> Self {
        let fill = InputProfile::constant(grid.nodes(), params.gap_acc_eq);
        Self {
            params,
            grid,
            eq,
            state,
            buffer: DelayBuffer::new(grid.delay_steps, fill.clone()),
            prev_command: fill,
            step_index: 0,
        }
    }

    #[inline]
    pub fn state(&self) -> &TrafficState<T> {
        &self.state
    }

    #[inline]
    pub fn prev_command(&self) -> &InputProfile<T> {
        &self.prev_command
    }

    #[inline]
    pub fn step_index(&self) -> usize {
        self.step_index
    }

    /// Routes `command` through the delay line and advances the plant one step.
    ///
    /// `plant_alpha` overrides the penetration ratio of the plant for this step only.
    pub fn advance(&mut self, command: InputProfile<T>, plant_alpha: Option<T>) -> Result<Applied<T>> {
        if command.len() != self.grid.nodes() {
            return Err(Error::Shape {
                context: "command",
                expected: self.grid.nodes(),
                got: command.len(),
            });
        }
        let applied = self.buffer.push_pop(command.clone());
        let mut plant = self.params;
        if let Some(alpha) = plant_alpha {
            plant.acc_ratio = alpha;
        }
        let next = step(&self.state, &applied, &plant, &self.grid, self.step_index)?;
        self.state = next;
        self.prev_command = command.clone();
        self.step_index += 1;
        Ok(Applied { commanded: command, applied })
    }
}

/// Options of a closed-loop run.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions<T> {
    /// Cosine amplitude of the initial density perturbation (veh/m).
    pub amplitude: T,
    pub alpha_noise: Option<AlphaNoise>,
}

impl<T: Scalar> Default for SimOptions<T> {
    fn default() -> Self {
        Self {
            amplitude: T::lit(0.010),
            alpha_noise: None,
        }
    }
}

/// Runs `grid.steps` steps from the initial condition, querying `controller` every step.
///
/// Divergence (positivity loss, or a CFL violation once the run is under way) ends the run
/// early with a flagged trace.
pub fn simulate<T, C, R>(
    controller: &mut C,
    params: &TrafficParams<T>,
    grid: &Grid<T>,
    options: &SimOptions<T>,
    rng: &mut R,
) -> Result<Trace<T>>
where
    T: Scalar,
    C: Controller<T> + ?Sized,
    R: Rng + ?Sized,
{
    let mut sim = Simulator::new(*params, *grid, options.amplitude)?;
    let mut trace = Trace::new(grid, sim.state().clone());
    let episode_alpha = options
        .alpha_noise
        .filter(|n| !n.per_step)
        .map(|n| T::lit(n.sample(rng)));

    for n in 0..grid.steps {
        let (command, clamps) = controller.command(sim.state(), sim.prev_command(), &sim.params, &sim.eq)?;
        trace.clamp_events += clamps;
        let alpha = match options.alpha_noise {
            Some(noise) if noise.per_step => Some(T::lit(noise.sample(rng))),
            _ => episode_alpha,
        };
        match sim.advance(command, alpha) {
            Ok(applied) => trace.push(sim.state().clone(), applied),
            Err(err @ (Error::Positivity { .. } | Error::Cfl { .. })) if n > 0 || matches!(err, Error::Positivity { .. }) => {
                trace.mark_diverged(n, &err);
                break;
            }
            Err(err) => return Err(err),
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests;
