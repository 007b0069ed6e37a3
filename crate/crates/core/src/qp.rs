//! Exact solver for the two-variable tracking QP.
//!
//! The problem is `min 1/2 (u - u_ref)^2 + lambda e^2` over at most a handful of
//! affine rows. In two dimensions the optimum is pinned by at most two
//! linearly independent active rows, so every active set of size 0, 1 and 2 is
//! enumerated, each equality-constrained subproblem is solved in closed form,
//! and the cheapest feasible candidate wins. Enumeration order (empty set,
//! singletons, pairs, each in tag order) fixes the tie-break.

use serde::{Deserialize, Serialize};

use crate::cbf::{ConstraintTag, QpProblem};

/// Absolute feasibility tolerance on every row.
pub const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub u: f64,
    pub e: f64,
    pub status: QpStatus,
    /// Rows defining the optimum, in tag order.
    pub active_set: Vec<ConstraintTag>,
    /// KKT multipliers aligned with `active_set`.
    pub multipliers: Vec<f64>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

struct Row {
    au: f64,
    ae: f64,
    c: f64,
    tag: ConstraintTag,
}

struct Candidate {
    u: f64,
    e: f64,
    obj: f64,
    active: Vec<usize>,
    mult: Vec<f64>,
}

impl Candidate {
    fn multipliers_ok(&self) -> bool {
        self.mult.iter().all(|m| *m >= -1e-9)
    }
}

fn rows_of(problem: &QpProblem) -> Vec<Row> {
    problem
        .constraints
        .iter()
        .map(|c| {
            let (au, ae, c0) = c.as_ge();
            Row {
                au,
                ae,
                c: c0,
                tag: c.tag,
            }
        })
        .collect()
}

fn feasible(rows: &[Row], u: f64, e: f64) -> bool {
    rows.iter().all(|r| r.au * u + r.ae * e + r.c >= -FEAS_TOL)
}

/// Solves the QP exactly; `Infeasible` when no `(u, e)` satisfies every row.
pub fn solve(problem: &QpProblem) -> QpSolution {
    let rows = rows_of(problem);
    let u0 = problem.u_ref;
    // Hessian diag(1, 2 lambda)
    let hu = 1.0;
    let he = 2.0 * problem.lambda;

    for r in &rows {
        if r.au == 0.0 && r.ae == 0.0 && r.c < -FEAS_TOL {
            return infeasible();
        }
    }
    let live: Vec<usize> = (0..rows.len())
        .filter(|&k| rows[k].au != 0.0 || rows[k].ae != 0.0)
        .collect();

    let mut best: Option<Candidate> = None;
    let mut consider = |cand: Candidate| {
        if !cand.obj.is_finite() || !feasible(&rows, cand.u, cand.e) {
            return;
        }
        let replace = match &best {
            None => true,
            Some(b) => {
                let tol = 1e-12 * (1.0 + b.obj.abs());
                cand.obj < b.obj - tol
                    || (cand.obj <= b.obj + tol && !b.multipliers_ok() && cand.multipliers_ok())
            }
        };
        if replace {
            best = Some(cand);
        }
    };

    consider(Candidate {
        u: u0,
        e: 0.0,
        obj: 0.0,
        active: vec![],
        mult: vec![],
    });

    for &k in &live {
        let r = &rows[k];
        // project z0 = (u0, 0) onto the hyperplane a.z + c = 0 in the H metric
        let denom = r.au * r.au / hu + r.ae * r.ae / he;
        let resid = r.au * u0 + r.c;
        let mu = -resid / denom;
        let u = u0 + mu * r.au / hu;
        let e = mu * r.ae / he;
        consider(Candidate {
            u,
            e,
            obj: problem.objective(u, e),
            active: vec![k],
            mult: vec![mu],
        });
    }

    for (ia, &k) in live.iter().enumerate() {
        for &l in &live[ia + 1..] {
            let (a, b) = (&rows[k], &rows[l]);
            let det = a.au * b.ae - a.ae * b.au;
            let scale = (a.au.abs() + a.ae.abs()) * (b.au.abs() + b.ae.abs());
            if det.abs() <= 1e-12 * scale {
                continue;
            }
            let u = (-a.c * b.ae + b.c * a.ae) / det;
            let e = (-b.c * a.au + a.c * b.au) / det;
            // H (z - z0) = mu_a a + mu_b b
            let gu = hu * (u - u0);
            let ge = he * e;
            let mu_a = (gu * b.ae - ge * b.au) / det;
            let mu_b = (a.au * ge - a.ae * gu) / det;
            consider(Candidate {
                u,
                e,
                obj: problem.objective(u, e),
                active: vec![k, l],
                mult: vec![mu_a, mu_b],
            });
        }
    }

    match best {
        Some(c) => QpSolution {
            u: c.u,
            e: c.e,
            status: QpStatus::Optimal,
            active_set: c.active.iter().map(|&k| rows[k].tag).collect(),
            multipliers: c.mult,
        },
        None => infeasible(),
    }
}

fn infeasible() -> QpSolution {
    QpSolution {
        u: f64::NAN,
        e: f64::NAN,
        status: QpStatus::Infeasible,
        active_set: vec![],
        multipliers: vec![],
    }
}

/// Fallback control for an infeasible QP.
///
/// Minimises the summed squared violation of the rows that do not involve the
/// slack, keeping `u` inside the hard control bounds. Among minimisers the one
/// closest to `u_ref` is returned. The status stays `Infeasible`.
pub fn solve_relaxed(problem: &QpProblem) -> QpSolution {
    let rows = rows_of(problem);
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut soft: Vec<&Row> = Vec::new();
    let mut slack_rows: Vec<&Row> = Vec::new();
    for r in &rows {
        if r.tag.is_bound() && r.ae == 0.0 && r.au != 0.0 {
            let b = -r.c / r.au;
            if r.au > 0.0 {
                lo = lo.max(b);
            } else {
                hi = hi.min(b);
            }
        } else if r.ae != 0.0 {
            slack_rows.push(r);
        } else if r.au != 0.0 {
            soft.push(r);
        }
    }
    if lo > hi {
        // contradictory bounds; take their midpoint
        let m = 0.5 * (lo + hi);
        lo = m;
        hi = m;
    }

    let slope = |u: f64| -> f64 {
        soft.iter()
            .map(|r| -2.0 * r.au * (-(r.au * u + r.c)).max(0.0))
            .sum()
    };

    // zero-violation interval intersected with the bounds
    let (mut zl, mut zh) = (lo, hi);
    for r in &soft {
        let b = -r.c / r.au;
        if r.au > 0.0 {
            zl = zl.max(b);
        } else {
            zh = zh.min(b);
        }
    }
    let u = if zl <= zh {
        problem.u_ref.clamp(zl, zh)
    } else {
        let (mut a, mut b) = (lo, hi);
        if a.is_infinite() || b.is_infinite() {
            // unbounded: bracket around the row breakpoints
            let pts: Vec<f64> = soft.iter().map(|r| -r.c / r.au).collect();
            let mn = pts.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
            let mx = pts.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
            if a.is_infinite() {
                a = mn.min(b);
            }
            if b.is_infinite() {
                b = mx.max(a);
            }
        }
        if slope(a) >= 0.0 {
            a
        } else if slope(b) <= 0.0 {
            b
        } else {
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if slope(m) < 0.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            0.5 * (a + b)
        }
    };

    let (mut el, mut eh) = (f64::NEG_INFINITY, f64::INFINITY);
    for r in &slack_rows {
        let b = -(r.au * u + r.c) / r.ae;
        if r.ae > 0.0 {
            el = el.max(b);
        } else {
            eh = eh.min(b);
        }
    }
    let e = if el <= eh { 0.0f64.clamp(el, eh) } else { el };

    QpSolution {
        u,
        e,
        status: QpStatus::Infeasible,
        active_set: vec![],
        multipliers: vec![],
    }
}
