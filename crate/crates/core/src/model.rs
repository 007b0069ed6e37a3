//! Domain types for the single-merge-point control zone and the original
//! constraint functions `b_q(x) >= 0`.
//!
//! Positions are arc lengths measured from each vehicle's own origin. Both
//! origins sit `L` metres upstream of the merging point, so positions on
//! different roads can be compared directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Merging geometry: two single-lane roads of equal length meeting at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Distance from each origin to the merging point, metres.
    pub cz_length: f64,
    pub num_lanes: u8,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            cz_length: 400.0,
            num_lanes: 2,
        }
    }
}

impl Geometry {
    pub fn new(cz_length: f64) -> Result<Self> {
        let g = Self {
            cz_length,
            num_lanes: 2,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cz_length > 0.0 && self.cz_length.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "control zone length must be positive, got {}",
                self.cz_length
            )));
        }
        if self.num_lanes != 2 {
            return Err(Error::InvalidParams(
                "only the two-road merging geometry is supported".into(),
            ));
        }
        Ok(())
    }
}

/// Longitudinal state of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CavState {
    pub x: f64,
    pub v: f64,
}

impl CavState {
    pub const fn new(x: f64, v: f64) -> Self {
        Self { x, v }
    }
}

/// Constraint and controller parameters shared by all vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintParams {
    /// Reaction time, seconds.
    pub phi: f64,
    /// Minimum standstill distance, metres.
    pub delta: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    /// CLF convergence rate.
    pub eps: f64,
    /// Weight on the CLF slack.
    pub lambda: f64,
}

impl Default for ConstraintParams {
    fn default() -> Self {
        Self {
            phi: 1.8,
            delta: 0.0,
            v_min: 0.0,
            v_max: 30.0,
            u_min: -5.886,
            u_max: 4.905,
            k1: 1.0,
            k2: 1.0,
            k3: 1.0,
            k4: 1.0,
            eps: 10.0,
            lambda: 10.0,
        }
    }
}

impl ConstraintParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParams(msg.to_string()));
        if !(self.phi > 0.0) {
            return bad("phi must be positive");
        }
        if !(self.delta >= 0.0) {
            return bad("delta must be non-negative");
        }
        if !(self.v_min >= 0.0 && self.v_max > self.v_min) {
            return bad("speed limits must satisfy 0 <= v_min < v_max");
        }
        if !(self.u_min < 0.0 && self.u_max > 0.0) {
            return bad("control limits must satisfy u_min < 0 < u_max");
        }
        if ![self.k1, self.k2, self.k3, self.k4]
            .iter()
            .all(|k| *k > 0.0)
        {
            return bad("class-K gains must be positive");
        }
        if !(self.eps > 0.0 && self.lambda > 0.0) {
            return bad("eps and lambda must be positive");
        }
        Ok(())
    }

    /// `max(u_max^2, u_min^2)`, the normaliser of the energy term.
    pub fn max_u_sq(&self) -> f64 {
        (self.u_max * self.u_max).max(self.u_min * self.u_min)
    }
}

/// Entry road of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lane {
    /// Main road, origin `O`.
    Main,
    /// Merging road, origin `O'`.
    Ramp,
}

impl Lane {
    pub fn other(self) -> Self {
        match self {
            Lane::Main => Lane::Ramp,
            Lane::Ramp => Lane::Main,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Lane::Main => "O",
            Lane::Ramp => "O'",
        }
    }
}

/// Persistent vehicle identity. FIFO indices shift as vehicles leave; ids never do.
pub type CavId = u32;

/// Half-widths of the event-trigger box around an anchor state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundVector {
    pub s_x: f64,
    pub s_v: f64,
}

impl BoundVector {
    pub const fn new(s_x: f64, s_v: f64) -> Self {
        Self { s_x, s_v }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_x > 0.0 && self.s_v > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "bound vector must be positive, got ({}, {})",
                self.s_x, self.s_v
            )))
        }
    }
}

impl Default for BoundVector {
    fn default() -> Self {
        Self::new(2.0, 0.5)
    }
}

/// One vehicle inside the control zone.
#[derive(Debug, Clone, PartialEq)]
pub struct CavAgent {
    pub id: CavId,
    pub lane: Lane,
    pub state: CavState,
    /// Arrival (admission) time.
    pub t0: f64,
    /// Exit time; equals the merging-point crossing time in this geometry.
    pub tf: Option<f64>,
    /// Zero-order-hold control currently applied.
    pub u_current: f64,
    /// Physically preceding vehicle on the same road.
    pub ip: Option<CavId>,
    /// Merging-conflict vehicle on the other road.
    pub j: Option<CavId>,
    /// State at the last own trigger.
    pub bound_anchor: CavState,
    pub s: BoundVector,
}

impl CavAgent {
    pub fn new(id: CavId, lane: Lane, t0: f64, v0: f64, s: BoundVector) -> Self {
        let state = CavState::new(0.0, v0);
        Self {
            id,
            lane,
            state,
            t0,
            tf: None,
            u_current: 0.0,
            ip: None,
            j: None,
            bound_anchor: state,
            s,
        }
    }
}

/// Rear-end safety margin `b1 = x_ip - x_i - phi*v_i - delta`.
pub fn eval_b1(agent: CavState, preceding: CavState, params: &ConstraintParams) -> f64 {
    preceding.x - agent.x - params.phi * agent.v - params.delta
}

/// Merging weight `Phi(x) = phi * x / L`.
pub fn phi_of_x(x: f64, geometry: &Geometry, params: &ConstraintParams) -> Result<f64> {
    let l = geometry.cz_length;
    if !(0.0..=l).contains(&x) {
        return Err(Error::Domain {
            what: "position in control zone",
            value: x,
            lo: 0.0,
            hi: l,
        });
    }
    Ok(merge_weight(x, geometry, params))
}

#[inline]
pub(crate) fn merge_weight(x: f64, geometry: &Geometry, params: &ConstraintParams) -> f64 {
    params.phi * x / geometry.cz_length
}

/// Safe-merging margin `b2 = (x_j - x_i) - Phi(x_i)*v_i - delta`.
pub fn eval_b2(
    agent: CavState,
    conflict: CavState,
    geometry: &Geometry,
    params: &ConstraintParams,
) -> f64 {
    conflict.x - agent.x - merge_weight(agent.x, geometry, params) * agent.v - params.delta
}

/// Speed-limit margins `(v_max - v, v - v_min)`.
pub fn eval_b3_b4(agent: CavState, params: &ConstraintParams) -> (f64, f64) {
    (params.v_max - agent.v, agent.v - params.v_min)
}
