//! Event-triggered robust CBF constraints.
//!
//! Between two triggers a vehicle's state is confined to a box of half-widths
//! `(s_x, s_v)` around its state at the last solve. Each CBF row
//! `L_f b + L_g b u + gamma(b) >= 0` is replaced by the same row with every
//! term replaced by its minimum over the product of the vehicle's box and the
//! box of the relevant neighbour. The control is held until some state
//! reaches the boundary of its box.
//!
//! All terms are linear, bilinear, or concave in each coordinate, so their
//! minima over a box are attained at vertices; the minimisations below are
//! closed-form vertex/endpoint enumerations.

use serde::{Deserialize, Serialize};

use crate::cbf::{
    build_clf, control_bounds, ConstraintTag, LinearConstraint, NeighborStates,
    QpProblem,
};
use crate::model::{BoundVector, CavAgent, CavState, ConstraintParams, Geometry};
use crate::planner::{eval_ref, UnconstrainedPlan};
use crate::qp::{solve, solve_relaxed, QpSolution};

/// Trigger box intersected with the admissible region `x in [0, L]`,
/// `v in [v_min, v_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lo: CavState,
    pub hi: CavState,
    /// Set when the raw box missed the admissible region entirely.
    pub degenerate: bool,
}

impl StateBox {
    pub fn point(s: CavState) -> Self {
        Self {
            lo: s,
            hi: s,
            degenerate: false,
        }
    }

    pub fn contains(&self, s: CavState) -> bool {
        (self.lo.x..=self.hi.x).contains(&s.x) && (self.lo.v..=self.hi.v).contains(&s.v)
    }

    fn vertices(&self) -> [CavState; 4] {
        [
            CavState::new(self.lo.x, self.lo.v),
            CavState::new(self.lo.x, self.hi.v),
            CavState::new(self.hi.x, self.lo.v),
            CavState::new(self.hi.x, self.hi.v),
        ]
    }
}

pub fn make_box(
    anchor: CavState,
    s: BoundVector,
    geometry: &Geometry,
    params: &ConstraintParams,
) -> StateBox {
    let clip_x = |x: f64| x.clamp(0.0, geometry.cz_length);
    let clip_v = |v: f64| v.clamp(params.v_min, params.v_max);
    let (xl, xh) = (
        (anchor.x - s.s_x).max(0.0),
        (anchor.x + s.s_x).min(geometry.cz_length),
    );
    let (vl, vh) = (
        (anchor.v - s.s_v).max(params.v_min),
        (anchor.v + s.s_v).min(params.v_max),
    );
    if xl > xh || vl > vh {
        let c = CavState::new(clip_x(anchor.x), clip_v(anchor.v));
        return StateBox {
            lo: c,
            hi: c,
            degenerate: true,
        };
    }
    StateBox {
        lo: CavState::new(xl, vl),
        hi: CavState::new(xh, vh),
        degenerate: false,
    }
}

/// How the drift and class-K terms are bounded from below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinMode {
    /// Independent minima of `L_f b` and `gamma(b)`.
    #[default]
    Componentwise,
    /// Minimum of `L_f b + gamma(b)` as a whole; never looser than componentwise.
    Joint,
}

/// Which bound on the state-dependent `L_g b2 = -phi x_i / L` enters the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LgChoice {
    /// Minimum over the box (valid for `u >= 0`).
    NonNegative,
    /// Maximum over the box (valid for `u < 0`).
    Negative,
    /// Both rows; valid for any sign of `u`.
    Both,
}

fn lf_b1(me: CavState, r: CavState) -> f64 {
    r.v - me.v
}

fn lf_b2(me: CavState, r: CavState, g: &Geometry, p: &ConstraintParams) -> f64 {
    r.v - me.v - p.phi / g.cz_length * me.v * me.v
}

fn gamma(
    q: ConstraintTag,
    me: CavState,
    r: CavState,
    g: &Geometry,
    p: &ConstraintParams,
) -> f64 {
    match q {
        ConstraintTag::Cbf1 => p.k1 * (r.x - me.x - p.phi * me.v - p.delta),
        ConstraintTag::Cbf2 => {
            p.k2 * (r.x - me.x - p.phi / g.cz_length * me.x * me.v - p.delta)
        }
        ConstraintTag::Cbf3 => p.k3 * (p.v_max - me.v),
        ConstraintTag::Cbf4 => p.k4 * (me.v - p.v_min),
        _ => 0.0,
    }
}

fn lf(q: ConstraintTag, me: CavState, r: CavState, g: &Geometry, p: &ConstraintParams) -> f64 {
    match q {
        ConstraintTag::Cbf1 => lf_b1(me, r),
        ConstraintTag::Cbf2 => lf_b2(me, r, g, p),
        _ => 0.0,
    }
}

fn needs_relevant(q: ConstraintTag) -> bool {
    matches!(q, ConstraintTag::Cbf1 | ConstraintTag::Cbf2)
}

/// Minimum of `L_f b_q` over `box_i x box_r`.
///
/// Returns `None` for `q` in {CBF1, CBF2} without a relevant box, or for a
/// tag that is not a CBF.
pub fn min_lf(
    q: ConstraintTag,
    box_i: &StateBox,
    box_r: Option<&StateBox>,
    geometry: &Geometry,
    params: &ConstraintParams,
) -> Option<f64> {
    match q {
        ConstraintTag::Cbf1 => {
            let r = box_r?;
            Some(r.lo.v - box_i.hi.v)
        }
        ConstraintTag::Cbf2 => {
            let r = box_r?;
            // concave in v_i: check both endpoints
            let at = |v: f64| lf_b2(CavState::new(0.0, v), CavState::new(0.0, r.lo.v), geometry, params);
            Some(at(box_i.lo.v).min(at(box_i.hi.v)))
        }
        ConstraintTag::Cbf3 | ConstraintTag::Cbf4 => Some(0.0),
        _ => None,
    }
}

/// Minimum of `gamma_q(b_q)` over `box_i x box_r`.
pub fn min_gamma(
    q: ConstraintTag,
    box_i: &StateBox,
    box_r: Option<&StateBox>,
    geometry: &Geometry,
    params: &ConstraintParams,
) -> Option<f64> {
    match q {
        ConstraintTag::Cbf1 => {
            let r = box_r?;
            Some(params.k1 * (r.lo.x - box_i.hi.x - params.phi * box_i.hi.v - params.delta))
        }
        ConstraintTag::Cbf2 => {
            let r = box_r?;
            // bilinear in (x_i, v_i), increasing in x_j
            let rlo = CavState::new(r.lo.x, 0.0);
            box_i
                .vertices()
                .iter()
                .map(|&me| gamma(q, me, rlo, geometry, params))
                .reduce(f64::min)
        }
        ConstraintTag::Cbf3 => Some(params.k3 * (params.v_max - box_i.hi.v)),
        ConstraintTag::Cbf4 => Some(params.k4 * (box_i.lo.v - params.v_min)),
        _ => None,
    }
}

/// Minimum of `L_f b_q + gamma_q(b_q)` taken as a single term.
pub fn min_joint(
    q: ConstraintTag,
    box_i: &StateBox,
    box_r: Option<&StateBox>,
    geometry: &Geometry,
    params: &ConstraintParams,
) -> Option<f64> {
    if !q.is_cbf() {
        return None;
    }
    if !needs_relevant(q) {
        return Some(min_lf(q, box_i, None, geometry, params)? + min_gamma(q, box_i, None, geometry, params)?);
    }
    let r = box_r?;
    let mut best = f64::INFINITY;
    for me in box_i.vertices() {
        for other in r.vertices() {
            let val = lf(q, me, other, geometry, params) + gamma(q, me, other, geometry, params);
            best = best.min(val);
        }
    }
    Some(best)
}

/// Bound on `L_g b2 = -phi x_i / L` matched to the sign of the control.
pub fn limit_lg_b2(
    u_nonnegative: bool,
    box_i: &StateBox,
    geometry: &Geometry,
    params: &ConstraintParams,
) -> f64 {
    let x = if u_nonnegative { box_i.hi.x } else { box_i.lo.x };
    -params.phi * x / geometry.cz_length
}

/// Per-constraint robust terms; `None` where the constraint is absent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RobustTerms {
    /// Indexed CBF1..CBF4.
    pub bf_min: [Option<f64>; 4],
    pub bgamma_min: [Option<f64>; 4],
    /// `L_g b2` over the box as `(min, max)`; the other `L_g` are constants.
    pub bg2_range: Option<(f64, f64)>,
    /// Joint minima, filled in `Joint` mode.
    pub joint_min: [Option<f64>; 4],
}

const CBF_TAGS: [ConstraintTag; 4] = [
    ConstraintTag::Cbf1,
    ConstraintTag::Cbf2,
    ConstraintTag::Cbf3,
    ConstraintTag::Cbf4,
];

/// Boxes entering one vehicle's robust QP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustBoxes {
    pub own: StateBox,
    pub ip: Option<StateBox>,
    pub j: Option<StateBox>,
}

impl RobustBoxes {
    fn relevant(&self, q: ConstraintTag) -> Option<&StateBox> {
        match q {
            ConstraintTag::Cbf1 => self.ip.as_ref(),
            ConstraintTag::Cbf2 => self.j.as_ref(),
            _ => None,
        }
    }
}

pub fn robust_terms(
    boxes: &RobustBoxes,
    geometry: &Geometry,
    params: &ConstraintParams,
    mode: MinMode,
) -> RobustTerms {
    let mut t = RobustTerms::default();
    for (k, q) in CBF_TAGS.iter().enumerate() {
        if needs_relevant(*q) && boxes.relevant(*q).is_none() {
            continue;
        }
        let r = boxes.relevant(*q);
        t.bf_min[k] = min_lf(*q, &boxes.own, r, geometry, params);
        t.bgamma_min[k] = min_gamma(*q, &boxes.own, r, geometry, params);
        if mode == MinMode::Joint {
            t.joint_min[k] = min_joint(*q, &boxes.own, r, geometry, params);
        }
    }
    if boxes.j.is_some() {
        t.bg2_range = Some((
            limit_lg_b2(true, &boxes.own, geometry, params),
            limit_lg_b2(false, &boxes.own, geometry, params),
        ));
    }
    t
}

/// Robust QP rows for the current boxes.
///
/// `state` is the vehicle's state at the solve instant and only feeds the
/// CLF row; the CBF rows depend on the boxes alone.
#[allow(clippy::too_many_arguments)]
pub fn build_robust_qp(
    agent: &CavAgent,
    boxes: &RobustBoxes,
    plan: &UnconstrainedPlan,
    t: f64,
    params: &ConstraintParams,
    geometry: &Geometry,
    mode: MinMode,
    lg: LgChoice,
    clf_enabled: bool,
) -> QpProblem {
    let terms = robust_terms(boxes, geometry, params, mode);
    let constant = |k: usize| -> Option<f64> {
        let comp = terms.bf_min[k]? + terms.bgamma_min[k]?;
        Some(match mode {
            MinMode::Componentwise => comp,
            MinMode::Joint => terms.joint_min[k].unwrap_or(comp).max(comp),
        })
    };
    let mut rows = Vec::with_capacity(8);
    if let Some(c) = constant(0) {
        rows.push(LinearConstraint::ge(ConstraintTag::Cbf1, -params.phi, 0.0, c));
    }
    if let (Some(c), Some((g_min, g_max))) = (constant(1), terms.bg2_range) {
        match lg {
            LgChoice::NonNegative => rows.push(LinearConstraint::ge(ConstraintTag::Cbf2, g_min, 0.0, c)),
            LgChoice::Negative => rows.push(LinearConstraint::ge(ConstraintTag::Cbf2, g_max, 0.0, c)),
            LgChoice::Both => {
                rows.push(LinearConstraint::ge(ConstraintTag::Cbf2, g_min, 0.0, c));
                rows.push(LinearConstraint::ge(ConstraintTag::Cbf2, g_max, 0.0, c));
            }
        }
    }
    if let Some(c) = constant(2) {
        rows.push(LinearConstraint::ge(ConstraintTag::Cbf3, -1.0, 0.0, c));
    }
    if let Some(c) = constant(3) {
        rows.push(LinearConstraint::ge(ConstraintTag::Cbf4, 1.0, 0.0, c));
    }
    let (u_ref, v_ref) = eval_ref(plan, t - agent.t0);
    if clf_enabled {
        rows.push(build_clf(agent.state, v_ref, params));
    }
    rows.extend(control_bounds(params));
    QpProblem {
        u_ref,
        lambda: params.lambda,
        constraints: rows,
    }
}

/// Outcome of the robust solve, including the sign-hint bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustSolve {
    pub problem: QpProblem,
    pub solution: QpSolution,
    /// Sign of the nominal solution, when a merging constraint is present.
    pub sign_hint: Option<bool>,
    pub lg_used: LgChoice,
    /// QP invocations spent, including the nominal sign-hint solve.
    pub qp_invocations: u32,
}

fn consistent(sol: &QpSolution, lg: LgChoice) -> bool {
    if !sol.is_optimal() {
        return false;
    }
    match lg {
        LgChoice::NonNegative => sol.u >= 0.0,
        LgChoice::Negative => sol.u <= 0.0,
        LgChoice::Both => true,
    }
}

/// Builds and solves the robust QP.
///
/// With a merging constraint present the sign of `u` is taken from the
/// nominal QP at the box centres. If the robust optimum contradicts that sign
/// the other limit is tried once; if neither is self-consistent both rows are
/// imposed, which is valid for either sign.
#[allow(clippy::too_many_arguments)]
pub fn solve_robust_qp(
    agent: &CavAgent,
    anchors: (CavState, NeighborStates),
    boxes: &RobustBoxes,
    plan: &UnconstrainedPlan,
    t: f64,
    params: &ConstraintParams,
    geometry: &Geometry,
    mode: MinMode,
    clf_enabled: bool,
) -> RobustSolve {
    let build = |lg| build_robust_qp(agent, boxes, plan, t, params, geometry, mode, lg, clf_enabled);
    if boxes.j.is_none() {
        let problem = build(LgChoice::NonNegative);
        let solution = solve(&problem);
        return RobustSolve {
            problem,
            solution,
            sign_hint: None,
            lg_used: LgChoice::NonNegative,
            qp_invocations: 1,
        };
    }

    let mut centre = agent.clone();
    centre.state = anchors.0;
    let nominal = crate::cbf::assemble_qp(&centre, anchors.1, plan, t, params, geometry, clf_enabled);
    let mut nominal_sol = solve(&nominal);
    if !nominal_sol.is_optimal() {
        nominal_sol = solve_relaxed(&nominal);
    }
    let hint = nominal_sol.u >= 0.0;
    let mut invocations = 1;

    let order = if hint {
        [LgChoice::NonNegative, LgChoice::Negative]
    } else {
        [LgChoice::Negative, LgChoice::NonNegative]
    };
    for lg in order {
        let problem = build(lg);
        let solution = solve(&problem);
        invocations += 1;
        if consistent(&solution, lg) {
            return RobustSolve {
                problem,
                solution,
                sign_hint: Some(hint),
                lg_used: lg,
                qp_invocations: invocations,
            };
        }
    }
    let problem = build(LgChoice::Both);
    let solution = solve(&problem);
    RobustSolve {
        problem,
        solution,
        sign_hint: Some(hint),
        lg_used: LgChoice::Both,
        qp_invocations: invocations + 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Position,
    Velocity,
}

fn smallest_positive_root(a: f64, b: f64, c: f64) -> Option<f64> {
    let pick = |r: f64| (r > 0.0 && r.is_finite()).then_some(r);
    if a == 0.0 {
        if b == 0.0 {
            return None;
        }
        return pick(-c / b);
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq + if b == 0.0 { sq } else { 0.0 });
    let r1 = q / a;
    let r2 = if q != 0.0 { c / q } else { r1 };
    match (pick(r1), pick(r2)) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    }
}

/// Earliest time at which a vehicle under constant `u` leaves the box of
/// half-widths `s` around `anchor`. Plant saturation is ignored, which can
/// only make the prediction early.
pub fn first_crossing_time(
    state: CavState,
    u: f64,
    anchor: CavState,
    s: BoundVector,
    horizon: f64,
) -> Option<(f64, EventKind)> {
    let dx0 = state.x - anchor.x;
    let dv0 = state.v - anchor.v;
    const EDGE: f64 = 1e-12;
    if dx0.abs() >= s.s_x - EDGE {
        return Some((0.0, EventKind::Position));
    }
    if dv0.abs() >= s.s_v - EDGE {
        return Some((0.0, EventKind::Velocity));
    }
    let t_v = if u > 0.0 {
        Some((s.s_v - dv0) / u)
    } else if u < 0.0 {
        Some((-s.s_v - dv0) / u)
    } else {
        None
    };
    let up = smallest_positive_root(0.5 * u, state.v, dx0 - s.s_x);
    let down = smallest_positive_root(0.5 * u, state.v, dx0 + s.s_x);
    let t_x = match (up, down) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let best = match (t_x, t_v) {
        (Some(x), Some(v)) if v < x => Some((v, EventKind::Velocity)),
        (Some(x), _) => Some((x, EventKind::Position)),
        (None, Some(v)) => Some((v, EventKind::Velocity)),
        (None, None) => None,
    };
    best.filter(|(t, _)| *t <= horizon)
}
