//! Deviation norms, per-step reward, and space-time performance indices of a trace.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EquilibriumPoint;
use crate::scalar::Scalar;
use crate::sim::{Trace, TrafficState};

pub const NORMS_SCHEMA: &str = "# schema: stopgo.norms v1";
pub const INDICES_SCHEMA: &str = "stopgo.indices v1";

/// Fuel-rate coefficients.
pub const B0: f64 = 25e-3;
pub const B1: f64 = 24.5e-6;
pub const B3: f64 = 32.5e-9;
pub const B4: f64 = 125e-6;

/// Root-mean-square deviation of density and velocity from equilibrium over all nodes.
pub fn l2_norms<T: Scalar>(state: &TrafficState<T>, eq: &EquilibriumPoint<T>) -> (T, T) {
    let n = T::lit(state.nodes().max(1) as f64);
    let sq = |xs: &[T], c: T| xs.iter().map(|&x| (x - c) * (x - c)).sum::<T>();
    ((sq(&state.rho, eq.rho) / n).sqrt(), (sq(&state.v, eq.v) / n).sqrt())
}

/// Negative sum over nodes of squared relative deviations; zero only at equilibrium.
pub fn reward<T: Scalar>(state: &TrafficState<T>, eq: &EquilibriumPoint<T>) -> T {
    let dr = state.rho.iter().map(|&r| {
        let e = (r - eq.rho) / eq.rho;
        e * e
    });
    let dv = state.v.iter().map(|&v| {
        let e = (v - eq.v) / eq.v;
        e * e
    });
    -(dr.sum::<T>() + dv.sum::<T>())
}

/// Reward of every snapshot after the initial one, i.e. the reward earned by each step.
pub fn reward_series<T: Scalar>(trace: &Trace<T>, eq: &EquilibriumPoint<T>) -> Vec<T> {
    (1..trace.len()).map(|n| reward(&trace.state(n), eq)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSample {
    pub t: f64,
    pub rho_l2: f64,
    pub v_l2: f64,
    pub reward: f64,
}

pub fn norm_series<T: Scalar>(trace: &Trace<T>, eq: &EquilibriumPoint<T>) -> Vec<NormSample> {
    (0..trace.len())
        .map(|n| {
            let s = trace.state(n);
            let (r, v) = l2_norms(&s, eq);
            NormSample {
                t: s.t.as_f64(),
                rho_l2: r.as_f64(),
                v_l2: v.as_f64(),
                reward: reward(&s, eq).as_f64(),
            }
        })
        .collect()
}

/// Writes `t,rho_l2,v_l2,reward` rows after the schema comment line.
pub fn write_norms_csv<W: Write>(mut out: W, samples: &[NormSample]) -> Result<()> {
    writeln!(out, "{NORMS_SCHEMA}").map_err(|e| Error::io("<norms>", e))?;
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io("<norms>", e))?;
    Ok(())
}

pub fn read_norms_csv<R: std::io::Read>(input: R) -> Result<Vec<NormSample>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Acceleration `a = v_t + v v_x` on every snapshot.
///
/// Derivatives are central in the interior and one-sided at the first and last node/snapshot.
pub fn accel_field<T: Scalar>(trace: &Trace<T>) -> Result<Vec<Vec<T>>> {
    let steps = trace.len();
    let nodes = trace.nodes();
    if steps < 2 || nodes < 2 {
        return Err(Error::Missing(format!(
            "acceleration needs at least 2 snapshots and 2 nodes, got {steps} x {nodes}"
        )));
    }
    let (dt, dx) = (trace.dt, trace.dx);
    let two = T::lit(2.0);
    let v = &trace.v;
    let mut out = Vec::with_capacity(steps);
    for n in 0..steps {
        let (lo, hi) = (n.saturating_sub(1), (n + 1).min(steps - 1));
        let span = dt * T::lit((hi - lo) as f64);
        let row: Vec<T> = (0..nodes)
            .map(|i| {
                let vt = (v[hi][i] - v[lo][i]) / span;
                let vx = if i == 0 {
                    (v[n][1] - v[n][0]) / dx
                } else if i + 1 == nodes {
                    (v[n][i] - v[n][i - 1]) / dx
                } else {
                    (v[n][i + 1] - v[n][i - 1]) / (two * dx)
                };
                vt + v[n][i] * vx
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuelModel {
    /// `b0 + b1 v + b3 v + b4 v a`.
    #[default]
    Paper,
    /// `b0 + b1 v + b3 v^3 + b4 v a`.
    Cubic,
}

pub fn fuel_rate<T: Scalar>(v: T, a: T, model: FuelModel) -> T {
    let third = match model {
        FuelModel::Paper => T::lit(B3) * v,
        FuelModel::Cubic => T::lit(B3) * v * v * v,
    };
    (T::lit(B0) + T::lit(B1) * v + third + T::lit(B4) * v * a).max(T::zero())
}

/// Space-time integrals over `[0, L] x [0, horizon]`, density in veh/km.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfIndices {
    pub j_ttt: f64,
    pub j_fuel: f64,
    pub j_comfort: f64,
    pub horizon: f64,
}

impl PerfIndices {
    /// Percentage reduction of each index relative to `baseline`.
    pub fn improvement_over(&self, baseline: &PerfIndices) -> Improvement {
        let pct = |ours: f64, base: f64| if base == 0.0 { 0.0 } else { 100.0 * (base - ours) / base };
        Improvement {
            j_ttt: pct(self.j_ttt, baseline.j_ttt),
            j_fuel: pct(self.j_fuel, baseline.j_fuel),
            j_comfort: pct(self.j_comfort, baseline.j_comfort),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub j_ttt: f64,
    pub j_fuel: f64,
    pub j_comfort: f64,
}

/// Trapezoid weights for `count` samples spaced `h` apart.
fn trapezoid_weights(count: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; count];
    if count > 0 {
        w[0] = h / 2.0;
        w[count - 1] = h / 2.0;
    }
    if count == 1 {
        w[0] = 0.0;
    }
    w
}

/// Total travel time, fuel, and comfort indices over the first `window` seconds
/// (the full trace when `None`).
///
/// The comfort integrand is `(a^2 + a_t^2) rho`, with `a_t` a forward difference in time
/// (backward on the last snapshot).
pub fn indices<T: Scalar>(trace: &Trace<T>, window: Option<f64>, fuel_model: FuelModel) -> Result<PerfIndices> {
    let dt = trace.dt.as_f64();
    let available = trace.len().saturating_sub(1);
    let steps = match window {
        None => available,
        Some(w) => {
            let want = (w / dt).round() as usize;
            if want > available || (want as f64 * dt - w).abs() > 1e-6 * w.max(1.0) {
                return Err(Error::Missing(format!(
                    "index window of {w} s exceeds the trace horizon of {} s or is not a multiple of dt",
                    available as f64 * dt
                )));
            }
            want
        }
    };
    let accel = accel_field(trace)?;
    let nodes = trace.nodes();
    let wt = trapezoid_weights(steps + 1, dt);
    let wx = trapezoid_weights(nodes, trace.dx.as_f64());
    let per_km = 1000.0;
    let (mut ttt, mut fuel, mut comfort) = (0.0, 0.0, 0.0);
    for n in 0..=steps {
        let (a_lo, a_hi) = if n + 1 < trace.len() { (n, n + 1) } else { (n - 1, n) };
        for i in 0..nodes {
            let w = wt[n] * wx[i];
            let rho = trace.rho[n][i].as_f64() * per_km;
            let v = trace.v[n][i].as_f64();
            let a = accel[n][i].as_f64();
            let a_t = (accel[a_hi][i].as_f64() - accel[a_lo][i].as_f64()) / dt;
            ttt += w * rho;
            fuel += w * fuel_rate(v, a, fuel_model) * rho;
            comfort += w * (a * a + a_t * a_t) * rho;
        }
    }
    Ok(PerfIndices {
        j_ttt: ttt,
        j_fuel: fuel,
        j_comfort: comfort,
        horizon: steps as f64 * dt,
    })
}

/// One row of the indices report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicesRow {
    pub scenario: String,
    pub controller: String,
    pub j_ttt: f64,
    pub j_fuel: f64,
    pub j_comfort: f64,
    pub improvement_vs_open_loop_percent: Improvement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicesReport {
    pub schema: String,
    pub units: String,
    pub fuel_model: FuelModel,
    pub window_s: f64,
    pub rows: Vec<IndicesRow>,
}

impl IndicesReport {
    pub fn new(fuel_model: FuelModel, window_s: f64) -> Self {
        Self {
            schema: INDICES_SCHEMA.to_string(),
            units: "density veh/km, length m, time s".to_string(),
            fuel_model,
            window_s,
            rows: Vec::new(),
        }
    }
}
