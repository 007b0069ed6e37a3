//! CBF, CLF and control-bound rows of the per-step tracking QP.
//!
//! Every row is affine in the decision variables `(u, e)`:
//! `cu*u + ce*e + c0 (>= | <=) 0`.

use serde::{Deserialize, Serialize};

use crate::model::{
    eval_b1, eval_b2, eval_b3_b4, merge_weight, CavAgent, CavState, ConstraintParams, Geometry,
};
use crate::planner::{eval_ref, UnconstrainedPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConstraintTag {
    Cbf1,
    Cbf2,
    Cbf3,
    Cbf4,
    Clf,
    Umin,
    Umax,
}

impl ConstraintTag {
    pub fn is_cbf(self) -> bool {
        matches!(self, Self::Cbf1 | Self::Cbf2 | Self::Cbf3 | Self::Cbf4)
    }

    pub fn is_bound(self) -> bool {
        matches!(self, Self::Umin | Self::Umax)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cbf1 => "CBF1",
            Self::Cbf2 => "CBF2",
            Self::Cbf3 => "CBF3",
            Self::Cbf4 => "CBF4",
            Self::Clf => "CLF",
            Self::Umin => "UMIN",
            Self::Umax => "UMAX",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    GeZero,
    LeZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraint {
    pub cu: f64,
    pub ce: f64,
    pub c0: f64,
    pub sense: Sense,
    pub tag: ConstraintTag,
}

impl LinearConstraint {
    pub fn ge(tag: ConstraintTag, cu: f64, ce: f64, c0: f64) -> Self {
        Self {
            cu,
            ce,
            c0,
            sense: Sense::GeZero,
            tag,
        }
    }

    pub fn le(tag: ConstraintTag, cu: f64, ce: f64, c0: f64) -> Self {
        Self {
            cu,
            ce,
            c0,
            sense: Sense::LeZero,
            tag,
        }
    }

    /// Raw left-hand side `cu*u + ce*e + c0`.
    pub fn lhs(&self, u: f64, e: f64) -> f64 {
        self.cu * u + self.ce * e + self.c0
    }

    /// Coefficients `(au, ae, c)` of the equivalent row `au*u + ae*e + c >= 0`.
    pub fn as_ge(&self) -> (f64, f64, f64) {
        match self.sense {
            Sense::GeZero => (self.cu, self.ce, self.c0),
            Sense::LeZero => (-self.cu, -self.ce, -self.c0),
        }
    }

    /// Signed slack; negative means the row is violated.
    pub fn margin(&self, u: f64, e: f64) -> f64 {
        let (au, ae, c) = self.as_ge();
        au * u + ae * e + c
    }

    /// Interval of `u` admitted by a row that does not involve `e`.
    pub fn u_interval(&self) -> (f64, f64) {
        let (au, _, c) = self.as_ge();
        if au > 0.0 {
            (-c / au, f64::INFINITY)
        } else if au < 0.0 {
            (f64::NEG_INFINITY, -c / au)
        } else if c >= 0.0 {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            (f64::INFINITY, f64::NEG_INFINITY)
        }
    }
}

/// `min 1/2 (u - u_ref)^2 + lambda e^2` subject to `constraints`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub u_ref: f64,
    pub lambda: f64,
    pub constraints: Vec<LinearConstraint>,
}

impl QpProblem {
    pub fn objective(&self, u: f64, e: f64) -> f64 {
        0.5 * (u - self.u_ref).powi(2) + self.lambda * e * e
    }

    pub fn row(&self, tag: ConstraintTag) -> Option<&LinearConstraint> {
        self.constraints.iter().find(|c| c.tag == tag)
    }
}

/// States of the neighbours that enter vehicle `i`'s constraints.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeighborStates {
    pub ip: Option<CavState>,
    pub j: Option<CavState>,
}

pub fn build_cbf1(
    agent: CavState,
    preceding: CavState,
    params: &ConstraintParams,
) -> LinearConstraint {
    let lf = preceding.v - agent.v;
    let gamma = params.k1 * eval_b1(agent, preceding, params);
    LinearConstraint::ge(ConstraintTag::Cbf1, -params.phi, 0.0, lf + gamma)
}

pub fn build_cbf2(
    agent: CavState,
    conflict: CavState,
    geometry: &Geometry,
    params: &ConstraintParams,
) -> LinearConstraint {
    let lf = conflict.v - agent.v - params.phi / geometry.cz_length * agent.v * agent.v;
    let lg = -merge_weight(agent.x, geometry, params);
    let gamma = params.k2 * eval_b2(agent, conflict, geometry, params);
    LinearConstraint::ge(ConstraintTag::Cbf2, lg, 0.0, lf + gamma)
}

/// Maximum and minimum speed rows, in that order.
pub fn build_speed_cbfs(
    agent: CavState,
    params: &ConstraintParams,
) -> (LinearConstraint, LinearConstraint) {
    let (b3, b4) = eval_b3_b4(agent, params);
    (
        LinearConstraint::ge(ConstraintTag::Cbf3, -1.0, 0.0, params.k3 * b3),
        LinearConstraint::ge(ConstraintTag::Cbf4, 1.0, 0.0, params.k4 * b4),
    )
}

/// Speed-tracking CLF with `V = (v - v_ref)^2`; `v_ref` is frozen over the step.
pub fn build_clf(agent: CavState, v_ref: f64, params: &ConstraintParams) -> LinearConstraint {
    let dv = agent.v - v_ref;
    LinearConstraint::le(ConstraintTag::Clf, 2.0 * dv, -1.0, params.eps * dv * dv)
}

pub fn control_bounds(params: &ConstraintParams) -> [LinearConstraint; 2] {
    [
        LinearConstraint::ge(ConstraintTag::Umin, 1.0, 0.0, -params.u_min),
        LinearConstraint::le(ConstraintTag::Umax, 1.0, 0.0, -params.u_max),
    ]
}

/// Time-driven QP for `agent` at absolute time `t`.
pub fn assemble_qp(
    agent: &CavAgent,
    neighbors: NeighborStates,
    plan: &UnconstrainedPlan,
    t: f64,
    params: &ConstraintParams,
    geometry: &Geometry,
    clf_enabled: bool,
) -> QpProblem {
    let (u_ref, v_ref) = eval_ref(plan, t - agent.t0);
    let s = agent.state;
    let mut rows = Vec::with_capacity(7);
    if let Some(ip) = neighbors.ip {
        rows.push(build_cbf1(s, ip, params));
    }
    if let Some(j) = neighbors.j {
        rows.push(build_cbf2(s, j, geometry, params));
    }
    let (c3, c4) = build_speed_cbfs(s, params);
    rows.push(c3);
    rows.push(c4);
    if clf_enabled {
        rows.push(build_clf(s, v_ref, params));
    }
    rows.extend(control_bounds(params));
    QpProblem {
        u_ref,
        lambda: params.lambda,
        constraints: rows,
    }
}
