//! Mixed ACC/manual freeway traffic on a finite road segment, simulated with a
//! first-order upwind scheme, and a PPO-trained three-gain time-gap controller that
//! suppresses stop-and-go waves under actuation delay.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix `f64`.

pub mod config;
pub mod control;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ppo;
pub mod scalar;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Params = model::TrafficParams<f64>;
pub type Equilibrium = model::EquilibriumPoint<f64>;
pub type State = sim::TrafficState<f64>;
pub type Input = sim::InputProfile<f64>;
pub type Grid = sim::Grid<f64>;
pub type Trace = sim::Trace<f64>;
pub type Network = nn::Mlp<f64>;
pub type Gains = control::GainAction<f64>;
