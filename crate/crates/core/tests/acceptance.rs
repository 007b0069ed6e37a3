//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::time::{Duration, Instant};

use ocbf::cbf::{ConstraintTag, LinearConstraint, QpProblem};
use ocbf::event::{first_crossing_time, limit_lg_b2, min_gamma, min_lf, StateBox};
use ocbf::model::{BoundVector, CavState, ConstraintParams, Geometry};
use ocbf::planner::{beta_from_alpha, eval_ref, solve_unconstrained};
use ocbf::qp::{solve, QpStatus};
use ocbf::sim::{run_batch, run_paired, Mode, NoiseConfig, PairedRun, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// criterion 1
const INFEASIBLE_RATIO_MAX: f64 = 0.25;
const PAIRED_RUNTIME_MAX: Duration = Duration::from_secs(120);
// criterion 2
const QP_RATIO_RANGE: (f64, f64) = (0.20, 0.80);
// criterion 3
const TRAVEL_REL_TOL: f64 = 0.10;
const TREND_SE_MULT: f64 = 2.0;
// criterion 4
const AUDIT_TOL: f64 = 1e-6;
const INVARIANCE_RUNS: u64 = 200;
// criterion 5
const NOISY_RUNS: u64 = 50;
const NOISY_WIN_FRACTION: f64 = 0.80;
// criterion 6
const QP_CASES: usize = 10_000;
const QP_TOL: f64 = 1e-3;
const QP_RUNTIME_MAX: Duration = Duration::from_secs(30);
// criterion 7
const BOX_CASES: usize = 1_000;
const BOX_GRID: usize = 200;
const BOX_TOL: f64 = 1e-6;
// criterion 8
const PLANNER_RESIDUAL_TOL: f64 = 1e-8;
const PLANNER_TERMINAL_TOL: f64 = 1e-6;
// criterion 9
const CROSSING_CASES: usize = 1_000;
const SAMPLE_HZ: f64 = 1000.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn paired_defaults() -> (Vec<PairedRun>, Duration) {
    let cfg = SimConfig {
        s_default: BoundVector::new(2.0, 0.5),
        ..SimConfig::default()
    };
    let seeds: Vec<u64> = (0..20).collect();
    let start = Instant::now();
    let pairs = run_paired(&cfg, &seeds).expect("paired runs");
    (pairs, start.elapsed())
}

fn c1_infeasibility(pairs: &[PairedRun], elapsed: Duration) -> Outcome {
    let time: u64 = pairs.iter().map(|p| p.time.metrics.qp_infeasible).sum();
    let event: u64 = pairs.iter().map(|p| p.event.metrics.qp_infeasible).sum();
    let ratio = event as f64 / time.max(1) as f64;
    outcome(
        (event as f64) <= INFEASIBLE_RATIO_MAX * time as f64 && elapsed < PAIRED_RUNTIME_MAX,
        format!("infeasible event {event} / time {time} = {ratio:.3} (max {INFEASIBLE_RATIO_MAX}), {elapsed:.2?}"),
    )
}

fn c2_computation(pairs: &[PairedRun]) -> Outcome {
    let time: u64 = pairs.iter().map(|p| p.time.metrics.qp_solved).sum();
    let event: u64 = pairs.iter().map(|p| p.event.metrics.qp_solved).sum();
    let ratio = event as f64 / time as f64;
    let every = pairs.iter().all(|p| p.event.metrics.qp_solved < p.time.metrics.qp_solved);
    outcome(
        ratio >= QP_RATIO_RANGE.0 && ratio <= QP_RATIO_RANGE.1 && every,
        format!("QP count event {event} / time {time} = {ratio:.3}, smaller on every pair: {every}"),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_err(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

fn c3_performance(pairs: &[PairedRun]) -> Outcome {
    let worst = pairs
        .iter()
        .map(|p| (p.event.metrics.avg_travel_time / p.time.metrics.avg_travel_time - 1.0).abs())
        .fold(0.0, f64::max);
    let seeds: Vec<u64> = (0..20).collect();
    let per_sx: Vec<Vec<f64>> = [1.5, 2.0, 2.5]
        .iter()
        .map(|&sx| {
            let cfg = SimConfig {
                mode: Mode::EventTriggered,
                s_default: BoundVector::new(sx, 0.5),
                ..SimConfig::default()
            };
            run_batch(&cfg, &seeds)
                .into_iter()
                .map(|r| r.expect("run").metrics.avg_travel_time)
                .collect()
        })
        .collect();
    let means: Vec<f64> = per_sx.iter().map(|v| mean(v)).collect();
    let mut trend = means[2] > means[0];
    for k in 0..2 {
        let diffs: Vec<f64> = per_sx[k + 1].iter().zip(&per_sx[k]).map(|(b, a)| b - a).collect();
        trend &= mean(&diffs) >= -TREND_SE_MULT * std_err(&diffs);
    }
    outcome(
        worst <= TRAVEL_REL_TOL && trend,
        format!(
            "max paired travel-time gap {:.2}%, event means over s_x 1.5/2/2.5: {:.4}/{:.4}/{:.4}",
            100.0 * worst,
            means[0],
            means[1],
            means[2]
        ),
    )
}

fn c4_invariance() -> Outcome {
    let cfg = SimConfig::default();
    let seeds: Vec<u64> = (1000..1000 + INVARIANCE_RUNS).collect();
    let (mut checked, mut bad, mut worst, mut all_violations) = (0, 0, f64::INFINITY, 0);
    for r in run_batch(&SimConfig { mode: Mode::EventTriggered, ..cfg }, &seeds) {
        let m = r.expect("run").metrics;
        all_violations += m.violations;
        if m.qp_infeasible > 0 {
            continue;
        }
        checked += 1;
        let low = [m.min_b1, m.min_b2, Some(m.min_b3), Some(m.min_b4)]
            .into_iter()
            .flatten()
            .fold(f64::INFINITY, f64::min);
        worst = worst.min(low);
        if m.violations > 0 || low < -AUDIT_TOL {
            bad += 1;
        }
    }
    outcome(
        bad == 0 && checked > 0,
        format!("{checked} of {INVARIANCE_RUNS} runs with all QPs optimal, {bad} with violations, worst margin {worst:.4}; audit violations over all runs: {all_violations}"),
    )
}

fn c5_noise() -> Outcome {
    let cfg = SimConfig {
        beta: Some(5.0),
        cav_count: 12,
        noise: Some(NoiseConfig::default()),
        s_default: BoundVector::new(1.5, 0.5),
        ..SimConfig::default()
    };
    let seeds: Vec<u64> = (0..NOISY_RUNS).collect();
    let pairs = run_paired(&cfg, &seeds).expect("noisy runs");
    let min_b1 = |m: &ocbf::metrics::RunMetrics| m.min_b1.unwrap_or(f64::INFINITY);
    let wins = pairs.iter().filter(|p| min_b1(&p.event.metrics) > min_b1(&p.time.metrics)).count();
    let frac = wins as f64 / pairs.len() as f64;
    outcome(
        frac >= NOISY_WIN_FRACTION,
        format!("event min b1 above time-driven on {wins}/{} seeds", pairs.len()),
    )
}

fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let mut rows = Vec::new();
    for tag in [ConstraintTag::Cbf1, ConstraintTag::Cbf2, ConstraintTag::Cbf3, ConstraintTag::Cbf4] {
        if rng.random_bool(0.7) {
            let cu = rng.random_range(-3.0..3.0);
            let c0 = rng.random_range(-6.0..14.0);
            rows.push(LinearConstraint::ge(tag, cu, 0.0, c0));
        }
    }
    if rng.random_bool(0.7) {
        let cu = rng.random_range(-2.0..2.0);
        let c0 = rng.random_range(-5.0..5.0);
        rows.push(LinearConstraint::le(ConstraintTag::Clf, cu, -1.0, c0));
    }
    let p = ConstraintParams::default();
    rows.push(LinearConstraint::ge(ConstraintTag::Umin, 1.0, 0.0, -p.u_min));
    rows.push(LinearConstraint::le(ConstraintTag::Umax, 1.0, 0.0, -p.u_max));
    QpProblem {
        u_ref: rng.random_range(-8.0..8.0),
        lambda: rng.random_range(0.5..20.0),
        constraints: rows,
    }
}

/// Grid search over the feasible `u` range followed by golden-section
/// refinement; `e` is eliminated exactly for each `u`.
fn qp_oracle(p: &QpProblem) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for r in &p.constraints {
        if r.ce == 0.0 {
            let (a, b) = r.u_interval();
            lo = lo.max(a);
            hi = hi.min(b);
        }
    }
    if lo > hi {
        return None;
    }
    let cost = |u: f64| {
        // smallest |e| meeting every row that involves e
        let (mut elo, mut ehi) = (f64::NEG_INFINITY, f64::INFINITY);
        for r in p.constraints.iter().filter(|r| r.ce != 0.0) {
            let (au, ae, c) = r.as_ge();
            let bound = -(au * u + c) / ae;
            if ae > 0.0 {
                elo = elo.max(bound);
            } else {
                ehi = ehi.min(bound);
            }
        }
        let e = 0.0f64.clamp(elo, ehi);
        0.5 * (u - p.u_ref).powi(2) + p.lambda * e * e
    };
    let n = 2000;
    let step = (hi - lo) / n as f64;
    let mut best = lo;
    for k in 0..=n {
        let u = lo + step * k as f64;
        if cost(u) < cost(best) {
            best = u;
        }
    }
    let (mut a, mut b) = ((best - step).max(lo), (best + step).min(hi));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..200 {
        let (c, d) = (b - g * (b - a), a + g * (b - a));
        if cost(c) < cost(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let u = 0.5 * (a + b);
    Some((u, cost(u)))
}

fn c6_qp() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let start = Instant::now();
    let (mut status_ok, mut value_ok, mut infeasible) = (0, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..QP_CASES {
        let p = random_qp(&mut rng);
        let s = solve(&p);
        match (qp_oracle(&p), s.status) {
            (None, QpStatus::Infeasible) => {
                status_ok += 1;
                value_ok += 1;
                infeasible += 1;
            }
            (Some((u, f)), QpStatus::Optimal) => {
                status_ok += 1;
                let err = (s.u - u).abs().max((p.objective(s.u, s.e) - f).abs());
                worst = worst.max(err);
                if err <= QP_TOL {
                    value_ok += 1;
                }
            }
            _ => {}
        }
    }
    let elapsed = start.elapsed();
    outcome(
        status_ok == QP_CASES && value_ok == QP_CASES && elapsed < QP_RUNTIME_MAX,
        format!(
            "status agree {status_ok}/{QP_CASES} ({infeasible} infeasible), optimum within {QP_TOL}: {value_ok}, worst {worst:.2e}, {elapsed:.2?}"
        ),
    )
}

fn random_box(rng: &mut ChaCha8Rng, p: &ConstraintParams) -> StateBox {
    let x0 = rng.random_range(0.0..400.0);
    let v0 = rng.random_range(p.v_min..p.v_max);
    let xl = (x0 - rng.random_range(0.0f64..5.0)).max(0.0);
    let xh = (x0 + rng.random_range(0.0f64..5.0)).min(400.0);
    let vl = (v0 - rng.random_range(0.0f64..2.0)).max(p.v_min);
    let vh = (v0 + rng.random_range(0.0f64..2.0)).min(p.v_max);
    StateBox {
        lo: CavState::new(xl, vl),
        hi: CavState::new(xh, vh),
        degenerate: false,
    }
}

fn grid(b: &StateBox, n: usize) -> Vec<CavState> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for k in 0..n {
            let fx = i as f64 / (n - 1) as f64;
            let fv = k as f64 / (n - 1) as f64;
            out.push(CavState::new(
                b.lo.x + fx * (b.hi.x - b.lo.x),
                b.lo.v + fv * (b.hi.v - b.lo.v),
            ));
        }
    }
    out
}

fn corners(b: &StateBox) -> [CavState; 4] {
    [
        CavState::new(b.lo.x, b.lo.v),
        CavState::new(b.lo.x, b.hi.v),
        CavState::new(b.hi.x, b.lo.v),
        CavState::new(b.hi.x, b.hi.v),
    ]
}

/// Drift and class-K terms written out directly from the constraint functions.
fn terms(q: ConstraintTag, me: CavState, r: CavState, g: &Geometry, p: &ConstraintParams) -> (f64, f64) {
    let w = p.phi / g.cz_length;
    match q {
        ConstraintTag::Cbf1 => (r.v - me.v, p.k1 * (r.x - me.x - p.phi * me.v - p.delta)),
        ConstraintTag::Cbf2 => (r.v - me.v - w * me.v * me.v, p.k2 * (r.x - me.x - w * me.x * me.v - p.delta)),
        ConstraintTag::Cbf3 => (0.0, p.k3 * (p.v_max - me.v)),
        _ => (0.0, p.k4 * (me.v - p.v_min)),
    }
}

fn c7_boxes() -> Outcome {
    let (g, p) = (Geometry::default(), ConstraintParams::default());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut unsound = 0;
    let tags = [ConstraintTag::Cbf1, ConstraintTag::Cbf2, ConstraintTag::Cbf3, ConstraintTag::Cbf4];
    for _ in 0..BOX_CASES {
        let me = random_box(&mut rng, &p);
        let r = random_box(&mut rng, &p);
        let own = grid(&me, BOX_GRID);
        // terms are affine in the neighbour state, so its corners suffice
        let others = corners(&r);
        for q in tags {
            let (mut lf_min, mut gamma_min) = (f64::INFINITY, f64::INFINITY);
            for s in &own {
                for o in &others {
                    let (lf, gm) = terms(q, *s, *o, &g, &p);
                    lf_min = lf_min.min(lf);
                    gamma_min = gamma_min.min(gm);
                }
            }
            let lf = min_lf(q, &me, Some(&r), &g, &p).expect("lf");
            let gm = min_gamma(q, &me, Some(&r), &g, &p).expect("gamma");
            worst = worst.max((lf - lf_min).abs()).max((gm - gamma_min).abs());
            for _ in 0..100 {
                let s = CavState::new(rng.random_range(me.lo.x..=me.hi.x), rng.random_range(me.lo.v..=me.hi.v));
                let o = CavState::new(rng.random_range(r.lo.x..=r.hi.x), rng.random_range(r.lo.v..=r.hi.v));
                let (a, b) = terms(q, s, o, &g, &p);
                if lf > a + 1e-12 || gm > b + 1e-12 {
                    unsound += 1;
                }
            }
        }
        let lg: Vec<f64> = own.iter().map(|s| -p.phi * s.x / g.cz_length).collect();
        let lg_min = lg.iter().copied().fold(f64::INFINITY, f64::min);
        let lg_max = lg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        worst = worst
            .max((limit_lg_b2(true, &me, &g, &p) - lg_min).abs())
            .max((limit_lg_b2(false, &me, &g, &p) - lg_max).abs());
    }
    outcome(
        worst <= BOX_TOL && unsound == 0,
        format!("{BOX_CASES} boxes, worst gap to grid {worst:.2e}, interior samples below minimum: {unsound}"),
    )
}

fn c8_planner() -> Outcome {
    let p = ConstraintParams::default();
    let length = 400.0;
    let (mut worst_res, mut worst_term): (f64, f64) = (0.0, 0.0);
    let mut failures = 0;
    for alpha in [0.1, 0.25, 0.4, 0.5] {
        let beta = beta_from_alpha(alpha, &p).unwrap();
        for k in 0..=50 {
            let v0 = 15.0 + 5.0 * k as f64 / 50.0;
            let Ok(plan) = solve_unconstrained(v0, length, beta) else {
                failures += 1;
                continue;
            };
            let (tf, vf) = (plan.tf, plan.v_terminal);
            let r1 = vf * vf - v0 * vf - 0.5 * beta * tf * tf;
            let r2 = v0 * tf + beta * tf.powi(3) / (3.0 * vf) - length;
            worst_res = worst_res.max(r1.abs()).max(r2.abs());
            // RK4 on the reference control; exact for this cubic trajectory
            let n = 4000;
            let h = tf / n as f64;
            let (mut x, mut v) = (0.0, v0);
            let u = |t: f64| eval_ref(&plan, t).0;
            for i in 0..n {
                let t = i as f64 * h;
                let (k1x, k1v) = (v, u(t));
                let (k2x, k2v) = (v + 0.5 * h * k1v, u(t + 0.5 * h));
                let (k3x, k3v) = (v + 0.5 * h * k2v, u(t + 0.5 * h));
                let (k4x, k4v) = (v + h * k3v, u(t + h));
                x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
                v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
            }
            worst_term = worst_term.max((x - length).abs()).max((v - vf).abs()).max(u(tf).abs());
        }
    }
    outcome(
        failures == 0 && worst_res < PLANNER_RESIDUAL_TOL && worst_term < PLANNER_TERMINAL_TOL,
        format!("204 plans, worst residual {worst_res:.2e}, worst terminal error {worst_term:.2e}, failures {failures}"),
    )
}

fn c9_crossing() -> Outcome {
    let p = ConstraintParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1.0 / SAMPLE_HZ;
    let horizon = 30.0;
    let mut agree = 0;
    for _ in 0..CROSSING_CASES {
        let s = BoundVector::new(rng.random_range(0.1..5.0), rng.random_range(0.05..2.0));
        let anchor = CavState::new(rng.random_range(0.0..400.0), rng.random_range(p.v_min..p.v_max));
        let state = CavState::new(
            anchor.x + rng.random_range(-0.9..0.9) * s.s_x,
            anchor.v + rng.random_range(-0.9..0.9) * s.s_v,
        );
        let u = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(p.u_min..p.u_max) };
        let analytic = first_crossing_time(state, u, anchor, s, horizon).map(|(t, _)| t);
        let inside = |t: f64| {
            let x = state.x + state.v * t + 0.5 * u * t * t;
            let v = state.v + u * t;
            (x - anchor.x).abs() < s.s_x && (v - anchor.v).abs() < s.s_v
        };
        let steps = (horizon * SAMPLE_HZ) as usize;
        let sampled = (1..=steps).map(|k| k as f64 * h).find(|&t| !inside(t));
        let ok = match (analytic, sampled) {
            (Some(a), Some(t)) => a <= t + 1e-12 && a > t - h - 1e-12,
            (None, None) => true,
            // a crossing in the last sample period before the horizon
            (Some(a), None) => a > horizon - h,
            (None, Some(_)) => false,
        };
        if ok {
            agree += 1;
        }
    }
    outcome(
        agree == CROSSING_CASES,
        format!("{agree}/{CROSSING_CASES} draws within one 1 kHz sample period"),
    )
}

fn main() {
    let start = Instant::now();
    let (pairs, elapsed) = paired_defaults();
    let results = [
        ("1 infeasibility reduction", c1_infeasibility(&pairs, elapsed)),
        ("2 computation load", c2_computation(&pairs)),
        ("3 performance proximity", c3_performance(&pairs)),
        ("4 forward invariance", c4_invariance()),
        ("5 robustness under noise", c5_noise()),
        ("6 QP oracle equivalence", c6_qp()),
        ("7 box minimisation", c7_boxes()),
        ("8 reference planner", c8_planner()),
        ("9 event-time exactness", c9_crossing()),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed, {:.2?}", results.len() - failed, start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
