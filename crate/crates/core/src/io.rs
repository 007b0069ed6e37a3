//! Config files, trace and summary serialization, and paired-run reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{fuel_rate, FuelParams, RunMetrics};
use crate::model::CavId;
use crate::sim::{LogEntry, Mode, PairedRun, SimConfig, SimOutput, TraceSample};

pub const TRACE_HEADER: [&str; 10] = ["t", "id", "x", "v", "u", "b1", "b2", "b3", "b4", "status"];

pub fn config_from_str(s: &str) -> Result<SimConfig> {
    let cfg: SimConfig = toml::from_str(s)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_string(cfg: &SimConfig) -> Result<String> {
    Ok(toml::to_string(cfg)?)
}

pub fn load_config(path: &Path) -> Result<SimConfig> {
    config_from_str(&fs::read_to_string(path)?)
}

pub fn save_config(path: &Path, cfg: &SimConfig) -> Result<()> {
    write_atomic(path, config_to_string(cfg)?.as_bytes())
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_traces<W: std::io::Write>(out: W, samples: &[TraceSample]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces<R: std::io::Read>(input: R) -> Result<Vec<TraceSample>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_log<W: std::io::Write>(mut out: W, log: &[LogEntry]) -> Result<()> {
    for e in log {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Per-vehicle totals rebuilt from a trace, assuming the control is held
/// between consecutive samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceTotals {
    pub travel_time: f64,
    pub half_u2: f64,
    pub fuel: f64,
    pub samples: usize,
}

pub fn totals_from_trace(samples: &[TraceSample], fp: &FuelParams) -> BTreeMap<CavId, TraceTotals> {
    let mut by_id: BTreeMap<CavId, Vec<&TraceSample>> = BTreeMap::new();
    for s in samples {
        by_id.entry(s.id).or_default().push(s);
    }
    by_id
        .into_iter()
        .map(|(id, rows)| {
            let mut half_u2 = 0.0;
            let mut fuel = 0.0;
            for w in rows.windows(2) {
                let (a, b) = (w[0], w[1]);
                let dt = b.t - a.t;
                half_u2 += 0.5 * a.u * a.u * dt;
                fuel += 0.5 * (fuel_rate(a.v, a.u, fp) + fuel_rate(b.v, a.u, fp)) * dt;
            }
            let travel_time = rows.last().map_or(0.0, |l| l.t) - rows.first().map_or(0.0, |f| f.t);
            (
                id,
                TraceTotals {
                    travel_time,
                    half_u2,
                    fuel,
                    samples: rows.len(),
                },
            )
        })
        .collect()
}

/// One line of the run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: Mode,
    pub seed: u64,
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

impl SummaryRow {
    pub fn new(mode: Mode, seed: u64, m: &RunMetrics) -> Self {
        Self {
            mode,
            seed,
            cav_count: m.cav_count,
            avg_travel_time: m.avg_travel_time,
            avg_half_u2: m.avg_half_u2,
            avg_fuel: m.avg_fuel,
            avg_objective: m.avg_objective,
            qp_solved: m.qp_solved,
            qp_infeasible: m.qp_infeasible,
            qp_invocations: m.qp_invocations,
            messages: m.messages,
            min_b1: m.min_b1,
            min_b2: m.min_b2,
            min_b3: m.min_b3,
            min_b4: m.min_b4,
            violations: m.violations,
            deferred_admissions: m.deferred_admissions,
        }
    }
}

impl From<&SimOutput> for SummaryRow {
    fn from(o: &SimOutput) -> Self {
        SummaryRow::new(o.mode, o.seed, &o.metrics)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub seed: u64,
    pub qp_time: u64,
    pub qp_event: u64,
    pub qp_ratio: f64,
    pub infeasible_time: u64,
    pub infeasible_event: u64,
    pub travel_time: [f64; 2],
    pub half_u2: [f64; 2],
    pub fuel: [f64; 2],
    pub messages_event: u64,
}

/// Paired-seed comparison; two-element arrays are `[time, event]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub pairs: Vec<PairComparison>,
    /// Total event QP count over total time-driven QP count.
    pub qp_ratio: f64,
    pub qp_invocation_ratio: f64,
    pub infeasible: [u64; 2],
    pub avg_travel_time: [f64; 2],
    pub avg_half_u2: [f64; 2],
    pub avg_fuel: [f64; 2],
    pub avg_objective: [f64; 2],
    pub messages_event: u64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        f64::NAN
    } else {
        a as f64 / b as f64
    }
}

pub fn compare(pairs: &[PairedRun]) -> Comparison {
    let n = pairs.len().max(1) as f64;
    let sum = |f: &dyn Fn(&RunMetrics) -> f64| {
        [
            pairs.iter().map(|p| f(&p.time.metrics)).sum::<f64>() / n,
            pairs.iter().map(|p| f(&p.event.metrics)).sum::<f64>() / n,
        ]
    };
    let total = |f: &dyn Fn(&RunMetrics) -> u64| {
        [
            pairs.iter().map(|p| f(&p.time.metrics)).sum::<u64>(),
            pairs.iter().map(|p| f(&p.event.metrics)).sum::<u64>(),
        ]
    };
    let qp = total(&|m| m.qp_solved);
    let inv = total(&|m| m.qp_invocations);
    Comparison {
        pairs: pairs
            .iter()
            .map(|p| {
                let (t, e) = (&p.time.metrics, &p.event.metrics);
                PairComparison {
                    seed: p.seed,
                    qp_time: t.qp_solved,
                    qp_event: e.qp_solved,
                    qp_ratio: ratio(e.qp_solved, t.qp_solved),
                    infeasible_time: t.qp_infeasible,
                    infeasible_event: e.qp_infeasible,
                    travel_time: [t.avg_travel_time, e.avg_travel_time],
                    half_u2: [t.avg_half_u2, e.avg_half_u2],
                    fuel: [t.avg_fuel, e.avg_fuel],
                    messages_event: e.messages,
                }
            })
            .collect(),
        qp_ratio: ratio(qp[1], qp[0]),
        qp_invocation_ratio: ratio(inv[1], inv[0]),
        infeasible: total(&|m| m.qp_infeasible),
        avg_travel_time: sum(&|m| m.avg_travel_time),
        avg_half_u2: sum(&|m| m.avg_half_u2),
        avg_fuel: sum(&|m| m.avg_fuel),
        avg_objective: sum(&|m| m.avg_objective),
        messages_event: total(&|m| m.messages)[1],
    }
}

/// Plain-text table of a comparison. Energy and fuel are both printed; their
/// orderings need not agree.
pub fn format_report(c: &Comparison) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>6} {:>8} {:>8} {:>6} {:>9} {:>9} {:>8} {:>8}",
        "seed", "qp_time", "qp_event", "ratio", "inf_time", "inf_event", "tt_time", "tt_event"
    );
    for p in &c.pairs {
        let _ = writeln!(
            s,
            "{:>6} {:>8} {:>8} {:>6.3} {:>9} {:>9} {:>8.3} {:>8.3}",
            p.seed,
            p.qp_time,
            p.qp_event,
            p.qp_ratio,
            p.infeasible_time,
            p.infeasible_event,
            p.travel_time[0],
            p.travel_time[1]
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<22} {:>12} {:>12}", "", "time", "event");
    let rows: [(&str, [f64; 2]); 4] = [
        ("avg travel time", c.avg_travel_time),
        ("avg 1/2 u^2", c.avg_half_u2),
        ("avg fuel", c.avg_fuel),
        ("avg objective", c.avg_objective),
    ];
    for (name, v) in rows {
        let _ = writeln!(s, "{name:<22} {:>12.4} {:>12.4}", v[0], v[1]);
    }
    let _ = writeln!(s, "{:<22} {:>12} {:>12}", "infeasible QPs", c.infeasible[0], c.infeasible[1]);
    let _ = writeln!(s, "{:<22} {:>12} {:>12}", "messages", 0, c.messages_event);
    let _ = writeln!(s, "QP count ratio (event/time): {:.4}", c.qp_ratio);
    let _ = writeln!(s, "QP invocation ratio (event/time): {:.4}", c.qp_invocation_ratio);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: Vec<SummaryRow>,
    pub comparison: Option<Comparison>,
}

/// Per-run trace and log files, named by mode and seed.
pub fn write_run_files(dir: &Path, out: &SimOutput) -> Result<()> {
    let stem = format!("{}_{}", out.mode.as_str(), out.seed);
    let mut buf = Vec::new();
    write_traces(&mut buf, &out.traces)?;
    write_atomic(&dir.join(format!("trace_{stem}.csv")), &buf)?;
    let mut buf = Vec::new();
    write_log(&mut buf, &out.log)?;
    write_atomic(&dir.join(format!("log_{stem}.jsonl")), &buf)?;
    Ok(())
}

/// `summary.csv`, `summary.json` and, for paired runs, `report.txt`.
pub fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &summary.runs {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    write_atomic(&dir.join("summary.csv"), &bytes)?;
    write_atomic(&dir.join("summary.json"), &serde_json::to_vec_pretty(summary)?)?;
    if let Some(c) = &summary.comparison {
        write_atomic(&dir.join("report.txt"), format_report(c).as_bytes())?;
    }
    Ok(())
}
