//! Per-vehicle records, run-level aggregates, fuel model and objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CavId, ConstraintParams, Lane};

/// Polynomial fuel model: cruise part in `v`, acceleration part in `(v, u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FuelParams {
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
}

impl Default for FuelParams {
    fn default() -> Self {
        Self {
            w0: 0.1569,
            w1: 0.02450,
            w2: -0.0007415,
            w3: 0.00005975,
            r0: 0.07224,
            r1: 0.09681,
            r2: 0.001075,
        }
    }
}

impl FuelParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w0, self.w1, self.w2, self.w3, self.r0, self.r1, self.r2];
        if all.iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParams("fuel coefficients must be finite".into()))
        }
    }
}

/// Instantaneous fuel rate. Braking adds nothing beyond the cruise term.
pub fn fuel_rate(v: f64, u: f64, fp: &FuelParams) -> f64 {
    let cruise = fp.w0 + v * (fp.w1 + v * (fp.w2 + v * fp.w3));
    let accel = (fp.r0 + v * (fp.r1 + v * fp.r2)) * u;
    cruise + accel.max(0.0)
}

/// Weighted time/energy cost of one transit, with the energy term
/// normalised by `max(u_max^2, u_min^2) / 2`.
pub fn objective_value(
    travel_time: f64,
    half_u2: f64,
    alpha: f64,
    params: &ConstraintParams,
) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Domain {
            what: "alpha",
            value: alpha,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(alpha * travel_time + (1.0 - alpha) * half_u2 / (0.5 * params.max_u_sq()))
}

/// Everything measured for one vehicle over its transit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: CavId,
    pub lane: Lane,
    pub t0: f64,
    pub tf: f64,
    pub travel_time: f64,
    /// Integral of `u^2 / 2` under the commanded control.
    pub half_u2: f64,
    pub fuel: f64,
    pub objective: f64,
    /// Worst audited margins; `None` when the constraint never applied.
    pub min_b1: Option<f64>,
    pub min_b2: Option<f64>,
    pub min_b3: f64,
    pub min_b4: f64,
    /// Control updates.
    pub qp_solved: u64,
    pub qp_infeasible: u64,
    /// All QP solver calls, including sign-hint and retry solves.
    pub qp_invocations: u64,
    pub own_triggers: u64,
    pub neighbor_triggers: u64,
    /// Shortest spacing between consecutive own-state triggers.
    pub min_trigger_gap: Option<f64>,
    /// Audit samples with some margin below the violation tolerance.
    pub violations: u64,
}

/// Run-level summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub cav_count: usize,
    pub avg_travel_time: f64,
    pub avg_half_u2: f64,
    pub avg_fuel: f64,
    pub avg_objective: f64,
    pub qp_solved: u64,
    pub qp_infeasible: u64,
    pub qp_invocations: u64,
    pub messages: u64,
    pub min_b1: Option<f64>,
    pub min_b2: Option<f64>,
    pub min_b3: f64,
    pub min_b4: f64,
    pub violations: u64,
    pub deferred_admissions: u64,
}

fn min_opt(acc: Option<f64>, x: Option<f64>) -> Option<f64> {
    match (acc, x) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

/// Per-vehicle means and run-wide totals/minima.
pub fn aggregate(records: &[RunRecord], messages: u64, deferred_admissions: u64) -> Result<RunMetrics> {
    if records.is_empty() {
        return Err(Error::EmptyMetrics);
    }
    let n = records.len() as f64;
    let mean = |f: fn(&RunRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(RunMetrics {
        cav_count: records.len(),
        avg_travel_time: mean(|r| r.travel_time),
        avg_half_u2: mean(|r| r.half_u2),
        avg_fuel: mean(|r| r.fuel),
        avg_objective: mean(|r| r.objective),
        qp_solved: records.iter().map(|r| r.qp_solved).sum(),
        qp_infeasible: records.iter().map(|r| r.qp_infeasible).sum(),
        qp_invocations: records.iter().map(|r| r.qp_invocations).sum(),
        messages,
        min_b1: records.iter().fold(None, |a, r| min_opt(a, r.min_b1)),
        min_b2: records.iter().fold(None, |a, r| min_opt(a, r.min_b2)),
        min_b3: records.iter().map(|r| r.min_b3).fold(f64::INFINITY, f64::min),
        min_b4: records.iter().map(|r| r.min_b4).fold(f64::INFINITY, f64::min),
        violations: records.iter().map(|r| r.violations).sum(),
        deferred_admissions,
    })
}
