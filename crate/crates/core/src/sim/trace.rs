use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Applied, Grid, InputProfile, TrafficState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TRACE_SCHEMA: &str = "# schema: stopgo.trace v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    Positivity,
    Cfl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub kind: DivergenceKind,
    /// Index of the step that failed; the trace holds `step + 1` snapshots.
    pub step: usize,
    pub message: String,
}

/// Space-time record of one run.
///
/// `rho[n]`, `v[n]` are the snapshots at `t = n dt`. `commanded[n]` and `applied[n]` are the
/// controller output and the delayed input used for the step from `n` to `n + 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trace<T> {
    pub dx: T,
    pub dt: T,
    pub rho: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub commanded: Vec<Vec<T>>,
    pub applied: Vec<Vec<T>>,
    pub diverged: Option<Divergence>,
    pub clamp_events: usize,
}

impl<T: Scalar> Trace<T> {
    pub fn new(grid: &Grid<T>, initial: TrafficState<T>) -> Self {
        let cap = grid.steps + 1;
        let mut rho = Vec::with_capacity(cap);
        let mut v = Vec::with_capacity(cap);
        rho.push(initial.rho);
        v.push(initial.v);
        Self {
            dx: grid.dx,
            dt: grid.dt,
            rho,
            v,
            commanded: Vec::with_capacity(grid.steps),
            applied: Vec::with_capacity(grid.steps),
            diverged: None,
            clamp_events: 0,
        }
    }

    pub(crate) fn push(&mut self, state: TrafficState<T>, applied: Applied<T>) {
        self.rho.push(state.rho);
        self.v.push(state.v);
        self.commanded.push(applied.commanded.0);
        self.applied.push(applied.applied.0);
    }

    pub(crate) fn mark_diverged(&mut self, step: usize, err: &Error) {
        let kind = match err {
            Error::Cfl { .. } => DivergenceKind::Cfl,
            _ => DivergenceKind::Positivity,
        };
        self.diverged = Some(Divergence {
            kind,
            step,
            message: err.to_string(),
        });
    }

    /// Number of state snapshots (steps taken + 1).
    #[inline]
    pub fn len(&self) -> usize {
        self.rho.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    #[inline]
    pub fn nodes(&self) -> usize {
        self.rho.first().map_or(0, Vec::len)
    }

    pub fn state(&self, n: usize) -> TrafficState<T> {
        TrafficState {
            rho: self.rho[n].clone(),
            v: self.v[n].clone(),
            t: self.dt * T::lit(n as f64),
        }
    }

    /// Input profile shown at snapshot `n`; the last snapshot repeats the last step's input.
    fn input_at(profiles: &[Vec<T>], n: usize) -> Option<&[T]> {
        if profiles.is_empty() {
            None
        } else {
            Some(&profiles[n.min(profiles.len() - 1)])
        }
    }

    pub fn applied_profile(&self, n: usize) -> Option<InputProfile<T>> {
        Self::input_at(&self.applied, n).map(|s| InputProfile(s.to_vec()))
    }

    /// Writes `t,x,rho,v,h_acc_applied,h_acc_commanded` rows, subsampled by the given strides.
    pub fn write_csv<W: Write>(&self, out: W, options: &TraceCsvOptions) -> Result<()> {
        let mut out = out;
        writeln!(out, "{TRACE_SCHEMA}").map_err(|e| Error::io("<trace>", e))?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "rho", "v", "h_acc_applied", "h_acc_commanded"])?;
        let t_stride = options.time_stride.max(1);
        let x_stride = options.space_stride.max(1);
        let nodes = self.nodes();
        for n in (0..self.len()).step_by(t_stride) {
            let t = self.dt * T::lit(n as f64);
            let applied = Self::input_at(&self.applied, n);
            let commanded = Self::input_at(&self.commanded, n);
            for i in (0..nodes).step_by(x_stride) {
                let x = self.dx * T::lit(i as f64);
                let ha = applied.map_or(f64::NAN, |p| p[i].as_f64());
                let hc = commanded.map_or(f64::NAN, |p| p[i].as_f64());
                w.write_record(&[
                    t.as_f64().to_string(),
                    x.as_f64().to_string(),
                    self.rho[n][i].as_f64().to_string(),
                    self.v[n][i].as_f64().to_string(),
                    ha.to_string(),
                    hc.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<trace>", e))?;
        Ok(())
    }
}

impl Trace<f64> {
    /// Reads a trace written by [`Trace::write_csv`]. The subsampled grid spacing becomes
    /// the trace's `dx` and `dt`.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(input);
        let mut rows: Vec<[f64; 6]> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let mut row = [0.0; 6];
            for (k, slot) in row.iter_mut().enumerate() {
                let field = record.get(k).ok_or_else(|| Error::Missing(format!("trace column {k}")))?;
                *slot = field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Missing(format!("numeric trace field `{field}`")))?;
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Missing("trace rows".into()));
        }
        let t0 = rows[0][0];
        let nodes = rows.iter().take_while(|r| r[0] == t0).count();
        if nodes < 2 || rows.len() % nodes != 0 {
            return Err(Error::Missing("rectangular (t, x) trace layout".into()));
        }
        let snapshots = rows.len() / nodes;
        let dx = rows[1][1] - rows[0][1];
        let dt = if snapshots > 1 { rows[nodes][0] - t0 } else { 0.0 };
        let mut trace = Trace {
            dx,
            dt,
            rho: Vec::with_capacity(snapshots),
            v: Vec::with_capacity(snapshots),
            commanded: Vec::with_capacity(snapshots),
            applied: Vec::with_capacity(snapshots),
            diverged: None,
            clamp_events: 0,
        };
        for chunk in rows.chunks(nodes) {
            trace.rho.push(chunk.iter().map(|r| r[2]).collect());
            trace.v.push(chunk.iter().map(|r| r[3]).collect());
            trace.applied.push(chunk.iter().map(|r| r[4]).collect());
            trace.commanded.push(chunk.iter().map(|r| r[5]).collect());
        }
        Ok(trace)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceCsvOptions {
    pub time_stride: usize,
    pub space_stride: usize,
}

impl Default for TraceCsvOptions {
    fn default() -> Self {
        Self {
            time_stride: 1,
            space_stride: 1,
        }
    }
}
