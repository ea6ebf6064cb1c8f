//! Closed-form relations of the mixed ACC/manual second-order traffic model.
//!
//! All quantities are SI: densities in veh/m, speeds in m/s, time gaps and
//! time constants in s, inflow in veh/s.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Physical and model constants of the freeway stretch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficParams<T> {
    /// Road length `L` (m).
    pub road_length: T,
    /// Average effective vehicle length `l` (m).
    pub vehicle_length: T,
    /// Constant upstream inflow `q_in` (veh/s).
    pub inflow: T,
    /// ACC penetration ratio `alpha` in `[0, 1]`.
    pub acc_ratio: T,
    /// ACC relaxation time constant (s).
    pub tau_acc: T,
    /// Manual-driver relaxation time constant (s).
    pub tau_manual: T,
    /// Manual-driver time gap (s).
    pub gap_manual: T,
    /// Equilibrium (nominal) ACC time gap (s).
    pub gap_acc_eq: T,
    /// Free-flow speed (m/s). Only used by the fundamental diagram and bound checks.
    pub free_flow_speed: T,
    /// Input delay `D` (s).
    pub input_delay: T,
    /// Lower actuation clamp for the commanded time gap (s).
    pub gap_min: T,
    /// Upper actuation clamp for the commanded time gap (s).
    pub gap_max: T,
}

impl<T: Scalar> TrafficParams<T> {
    /// Table values of the reference freeway: 1 km, 1200 veh/h, 15 % ACC, no delay.
    ///
    /// `free_flow_speed`, `gap_min` and `gap_max` are not part of the reference table;
    /// they default to 30 m/s, 0.5 s and 3.0 s.
    pub fn reference() -> Self {
        Self {
            road_length: T::lit(1000.0),
            vehicle_length: T::lit(5.0),
            inflow: T::lit(1200.0 / 3600.0),
            acc_ratio: T::lit(0.15),
            tau_acc: T::lit(2.0),
            tau_manual: T::lit(60.0),
            gap_manual: T::lit(1.0),
            gap_acc_eq: T::lit(1.5),
            free_flow_speed: T::lit(30.0),
            input_delay: T::zero(),
            gap_min: T::lit(0.5),
            gap_max: T::lit(3.0),
        }
    }

    pub fn with_delay(mut self, delay: T) -> Self {
        self.input_delay = delay;
        self
    }

    pub fn with_acc_ratio(mut self, alpha: T) -> Self {
        self.acc_ratio = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("road_length", self.road_length),
            ("vehicle_length", self.vehicle_length),
            ("inflow", self.inflow),
            ("tau_acc", self.tau_acc),
            ("tau_manual", self.tau_manual),
            ("gap_manual", self.gap_manual),
            ("gap_acc_eq", self.gap_acc_eq),
            ("free_flow_speed", self.free_flow_speed),
        ];
        for (what, value) in positive {
            if !(value > T::zero()) || !value.is_finite() {
                return Err(Error::Domain {
                    what,
                    value: value.as_f64(),
                });
            }
        }
        check_ratio(self.acc_ratio)?;
        if !(self.input_delay >= T::zero()) {
            return Err(Error::Domain {
                what: "input_delay",
                value: self.input_delay.as_f64(),
            });
        }
        let lo = self.gap_manual.min(self.gap_acc_eq);
        let hi = self.gap_manual.max(self.gap_acc_eq);
        if !(self.gap_min < lo) || !(self.gap_min > T::zero()) {
            return Err(Error::Domain {
                what: "gap_min",
                value: self.gap_min.as_f64(),
            });
        }
        if !(self.gap_max > hi) {
            return Err(Error::Domain {
                what: "gap_max",
                value: self.gap_max.as_f64(),
            });
        }
        Ok(())
    }

    /// Jam density `1/l` (veh/m).
    #[inline]
    pub fn jam_density(&self) -> T {
        T::one() / self.vehicle_length
    }

    #[inline]
    pub fn clamp_gap(&self, h: T) -> T {
        h.max(self.gap_min).min(self.gap_max)
    }
}

/// Uniform steady state of the closed system for the nominal ACC time gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint<T> {
    pub rho: T,
    pub v: T,
    pub h_mix: T,
}

fn check_ratio<T: Scalar>(alpha: T) -> Result<()> {
    if alpha >= T::zero() && alpha <= T::one() {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "acc_ratio",
            value: alpha.as_f64(),
        })
    }
}

fn check_positive<T: Scalar>(what: &'static str, value: T) -> Result<()> {
    if value > T::zero() && value.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            what,
            value: value.as_f64(),
        })
    }
}

/// Mixed relaxation time constant: harmonic blend of ACC and manual constants.
pub fn tau_mix<T: Scalar>(alpha: T, tau_acc: T, tau_manual: T) -> Result<T> {
    check_ratio(alpha)?;
    check_positive("tau_acc", tau_acc)?;
    check_positive("tau_manual", tau_manual)?;
    Ok(T::one() / (alpha / tau_acc + (T::one() - alpha) / tau_manual))
}

/// Mixed time gap of the fleet when ACC vehicles keep `h_acc`.
pub fn h_mix<T: Scalar>(h_acc: T, params: &TrafficParams<T>) -> Result<T> {
    check_positive("h_acc", h_acc)?;
    check_ratio(params.acc_ratio)?;
    let alpha = params.acc_ratio;
    let kappa = params.tau_acc / params.tau_manual;
    let manual_share = (T::one() - alpha) * kappa;
    let den = alpha + manual_share * h_acc / params.gap_manual;
    if !(den > T::zero()) {
        return Err(Error::Domain {
            what: "h_mix denominator",
            value: den.as_f64(),
        });
    }
    Ok((alpha + manual_share) / den * h_acc)
}

/// Equilibrium speed `(1/h_mix) (1/rho - l)`.
pub fn v_mix<T: Scalar>(rho: T, h_acc: T, params: &TrafficParams<T>) -> Result<T> {
    check_positive("rho", rho)?;
    let gap = h_mix(h_acc, params)?;
    Ok((T::one() / rho - params.vehicle_length) / gap)
}

/// Analytic `dV_mix/drho = -1 / (h_mix rho^2)`.
pub fn dv_mix_drho<T: Scalar>(rho: T, h_acc: T, params: &TrafficParams<T>) -> Result<T> {
    check_positive("rho", rho)?;
    let gap = h_mix(h_acc, params)?;
    Ok(-T::one() / (gap * rho * rho))
}

/// Critical density of the fundamental diagram, where the congested branch meets `v_f rho`.
///
/// This is also the smallest density for which `v_mix` stays below the free-flow speed.
pub fn critical_density<T: Scalar>(h_mix: T, params: &TrafficParams<T>) -> T {
    T::one() / (params.vehicle_length + h_mix * params.free_flow_speed)
}

/// Piecewise fundamental diagram: free branch `v_f rho`, congested branch `(1 - l rho)/h_mix`.
pub fn flow_q<T: Scalar>(rho: T, h_mix: T, params: &TrafficParams<T>) -> Result<T> {
    if !(rho >= T::zero() && rho <= params.jam_density()) {
        return Err(Error::Domain {
            what: "rho",
            value: rho.as_f64(),
        });
    }
    check_positive("h_mix", h_mix)?;
    if rho <= critical_density(h_mix, params) {
        Ok(params.free_flow_speed * rho)
    } else {
        Ok((T::one() - params.vehicle_length * rho) / h_mix)
    }
}

/// Uniform equilibrium for inflow `q_in` and constant ACC gap `gap_acc_eq`.
pub fn equilibrium<T: Scalar>(params: &TrafficParams<T>) -> Result<EquilibriumPoint<T>> {
    let gap = h_mix(params.gap_acc_eq, params)?;
    let headway = T::one() / params.inflow;
    if !(headway > gap) {
        return Err(Error::Infeasible(format!(
            "1/q_in = {} s must exceed h_mix = {} s",
            headway.as_f64(),
            gap.as_f64()
        )));
    }
    let v = params.vehicle_length / (headway - gap);
    let rho = T::one() / (params.vehicle_length + gap * v);
    Ok(EquilibriumPoint { rho, v, h_mix: gap })
}

/// Characteristic speeds `(lambda1, lambda2) = (v, v + rho dV/drho)`.
pub fn char_speeds<T: Scalar>(
    rho: T,
    v: T,
    h_acc: T,
    params: &TrafficParams<T>,
) -> Result<(T, T)> {
    let slope = dv_mix_drho(rho, h_acc, params)?;
    Ok((v, v + rho * slope))
}
