//! Unconstrained energy/time-optimal reference trajectory.
//!
//! Minimising `beta*(tf - t0) + int 1/2 u^2` subject to `x' = v, v' = u`,
//! `x(tf) = L` with free `v(tf)` and free `tf` gives a control that is linear
//! in time and vanishes at `tf`:
//!
//! ```text
//! u*(t) = a t + b,   a = -beta / v_f,   b = beta tf / v_f
//! v_f^2 = v0 v_f + beta tf^2 / 2
//! v0 tf + beta tf^3 / (3 v_f) = L
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ConstraintParams;

/// Reference trajectory, time measured from the vehicle's arrival.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnconstrainedPlan {
    /// Slope of the optimal control, m/s^3.
    pub a: f64,
    /// Intercept of the optimal control, m/s^2.
    pub b_coef: f64,
    /// Terminal time relative to arrival.
    pub tf: f64,
    pub v_terminal: f64,
    pub v0: f64,
}

impl UnconstrainedPlan {
    /// Zero-control cruise at the entry speed. Used when the solver fails.
    pub fn cruise(v0: f64, length: f64) -> Self {
        Self {
            a: 0.0,
            b_coef: 0.0,
            tf: if v0 > 0.0 { length / v0 } else { f64::INFINITY },
            v_terminal: v0,
            v0,
        }
    }

    /// Residuals of the two stationarity/boundary equations.
    pub fn residuals(&self, length: f64, beta: f64) -> (f64, f64) {
        let (tf, vf, v0) = (self.tf, self.v_terminal, self.v0);
        (
            vf * vf - v0 * vf - 0.5 * beta * tf * tf,
            v0 * tf + beta * tf * tf * tf / (3.0 * vf) - length,
        )
    }
}

/// Converts the normalised time weight `alpha` into `beta`.
pub fn beta_from_alpha(alpha: f64, params: &ConstraintParams) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Domain {
            what: "alpha",
            value: alpha,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(alpha * params.max_u_sq() / (2.0 * (1.0 - alpha)))
}

const NEWTON_TOL: f64 = 1e-12;
const MAX_NEWTON: usize = 60;

fn residual(v0: f64, length: f64, beta: f64, tf: f64, vf: f64) -> [f64; 2] {
    [
        vf * vf - v0 * vf - 0.5 * beta * tf * tf,
        v0 * tf + beta * tf.powi(3) / (3.0 * vf) - length,
    ]
}

fn norm(r: [f64; 2], length: f64) -> f64 {
    // second equation is in metres; scale it to the first's magnitude
    r[0].abs().max(r[1].abs() / length.max(1.0))
}

fn newton(v0: f64, length: f64, beta: f64, mut tf: f64, mut vf: f64) -> Option<(f64, f64)> {
    let mut r = residual(v0, length, beta, tf, vf);
    for _ in 0..MAX_NEWTON {
        if r[0].abs() < NEWTON_TOL * vf.max(1.0).powi(2) && r[1].abs() < NEWTON_TOL * length {
            return Some((tf, vf));
        }
        let j11 = -beta * tf;
        let j12 = 2.0 * vf - v0;
        let j21 = v0 + beta * tf * tf / vf;
        let j22 = -beta * tf.powi(3) / (3.0 * vf * vf);
        let det = j11 * j22 - j12 * j21;
        if det.abs() < 1e-300 || !det.is_finite() {
            return None;
        }
        let dt = (r[0] * j22 - j12 * r[1]) / det;
        let dv = (j11 * r[1] - j21 * r[0]) / det;
        let current = norm(r, length);
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-6 {
            let (nt, nv) = (tf - step * dt, vf - step * dv);
            if nt > 0.0 && nv > 0.0 {
                let nr = residual(v0, length, beta, nt, nv);
                if norm(nr, length) < current || norm(nr, length) == 0.0 {
                    tf = nt;
                    vf = nv;
                    r = nr;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let ok = r[0].abs() < 1e-9 && r[1].abs() < 1e-9;
    ok.then_some((tf, vf))
}

fn terminal_speed(v0: f64, beta: f64, tf: f64) -> f64 {
    0.5 * (v0 + (v0 * v0 + 2.0 * beta * tf * tf).sqrt())
}

fn bisection(v0: f64, length: f64, beta: f64) -> Option<(f64, f64)> {
    let g = |tf: f64| {
        let vf = terminal_speed(v0, beta, tf);
        v0 * tf + beta * tf.powi(3) / (3.0 * vf) - length
    };
    let (mut lo, mut hi) = (0.0, length / v0);
    if g(hi) < 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * hi {
            break;
        }
    }
    let tf = 0.5 * (lo + hi);
    Some((tf, terminal_speed(v0, beta, tf)))
}

/// Solves the unconstrained problem from entry speed `v0` over distance `length`.
pub fn solve_unconstrained(v0: f64, length: f64, beta: f64) -> Result<UnconstrainedPlan> {
    if !(v0 > 0.0 && length > 0.0 && beta >= 0.0) || !beta.is_finite() {
        return Err(Error::PlannerDiverged { v0, length, beta });
    }
    if beta == 0.0 {
        return Ok(UnconstrainedPlan::cruise(v0, length));
    }
    let (tf, vf) = newton(v0, length, beta, length / v0, v0)
        .or_else(|| {
            let (tf, vf) = bisection(v0, length, beta)?;
            newton(v0, length, beta, tf, vf).or(Some((tf, vf)))
        })
        .ok_or(Error::PlannerDiverged { v0, length, beta })?;
    let plan = UnconstrainedPlan {
        a: -beta / vf,
        b_coef: beta * tf / vf,
        tf,
        v_terminal: vf,
        v0,
    };
    let (r1, r2) = plan.residuals(length, beta);
    if r1.abs() > 1e-8 || r2.abs() > 1e-8 {
        return Err(Error::PlannerDiverged { v0, length, beta });
    }
    Ok(plan)
}

/// Reference control and speed `t` seconds after arrival.
pub fn eval_ref(plan: &UnconstrainedPlan, t: f64) -> (f64, f64) {
    let t = t.max(0.0);
    if t >= plan.tf {
        (0.0, plan.v_terminal)
    } else {
        (
            plan.a * t + plan.b_coef,
            plan.v0 + plan.b_coef * t + 0.5 * plan.a * t * t,
        )
    }
}
