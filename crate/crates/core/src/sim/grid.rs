use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TrafficParams;
use crate::scalar::Scalar;

/// Uniform space-time discretization of `[0, L] x [0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    /// Number of cells `M`; the grid has `M + 1` nodes.
    pub cells: usize,
    pub dx: T,
    /// Number of time steps `N` in the horizon.
    pub steps: usize,
    pub dt: T,
    /// Input delay in whole steps, `D / dt`.
    pub delay_steps: usize,
}

impl<T: Scalar> Grid<T> {
    #[inline]
    pub fn nodes(&self) -> usize {
        self.cells + 1
    }

    #[inline]
    pub fn x(&self, i: usize) -> T {
        self.dx * T::lit(i as f64)
    }

    #[inline]
    pub fn t(&self, n: usize) -> T {
        self.dt * T::lit(n as f64)
    }

    /// Largest characteristic speed the grid can transport stably, `dx/dt`.
    #[inline]
    pub fn speed_limit(&self) -> T {
        self.dx / self.dt
    }
}

/// Returns `value / step` when it is an integer within relative tolerance `tol`.
pub(crate) fn whole_ratio(value: f64, step: f64, tol: f64) -> Option<usize> {
    if !(step > 0.0) || !(value >= 0.0) {
        return None;
    }
    let ratio = value / step;
    let rounded = ratio.round();
    if (ratio - rounded).abs() <= tol * rounded.max(1.0) {
        Some(rounded as usize)
    } else {
        None
    }
}

/// Builds the grid and checks divisibility of `L` by `dx`, of `D` and `horizon` by `dt`,
/// and that `dx/dt` is at least `speed_bound`.
pub fn make_grid<T: Scalar>(
    params: &TrafficParams<T>,
    dx: T,
    dt: T,
    horizon: T,
    speed_bound: T,
) -> Result<Grid<T>> {
    if !(dx > T::zero()) {
        return Err(Error::config("dx", "must be positive"));
    }
    if !(dt > T::zero()) {
        return Err(Error::config("dt", "must be positive"));
    }
    // Decimal steps such as 0.1 are inexact in f32; allow a few ulps of the scalar type.
    let tol = (T::epsilon().as_f64() * 8.0).max(1e-9);
    let cells = whole_ratio(params.road_length.as_f64(), dx.as_f64(), tol)
        .filter(|&m| m >= 2)
        .ok_or_else(|| {
            Error::config(
                "dx",
                format!(
                    "road length {} m is not a multiple of dx = {} m",
                    params.road_length, dx
                ),
            )
        })?;
    let delay_steps = whole_ratio(params.input_delay.as_f64(), dt.as_f64(), tol).ok_or_else(|| {
        Error::config(
            "dt",
            format!("input delay {} s is not a multiple of dt = {} s", params.input_delay, dt),
        )
    })?;
    let steps = whole_ratio(horizon.as_f64(), dt.as_f64(), tol).ok_or_else(|| {
        Error::config(
            "dt",
            format!("horizon {} s is not a multiple of dt = {} s", horizon, dt),
        )
    })?;
    if dx / dt < speed_bound {
        return Err(Error::Grid(format!(
            "dx/dt = {} m/s is below the worst-case speed bound {} m/s",
            dx / dt,
            speed_bound
        )));
    }
    Ok(Grid {
        cells,
        dx,
        steps,
        dt,
        delay_steps,
    })
}
