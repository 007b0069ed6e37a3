//! Python bindings for the `ocbf` merging controller.

use std::path::PathBuf;

use ocbf::event::{EventKind, MinMode};
use ocbf::io::{compare, config_from_str, config_to_string, format_report, write_run_files, write_summary, Summary, SummaryRow};
use ocbf::model::{BoundVector, CavState, ConstraintParams, Geometry};
use ocbf::planner::UnconstrainedPlan;
use ocbf::sim::{Mode, NoiseConfig, NotifyPolicy, SimConfig, SimOutput};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: ocbf::Error) -> PyErr {
    use ocbf::Error as E;
    match e {
        E::Io(io) => PyOSError::new_err(io.to_string()),
        E::PlannerDiverged { .. } | E::EmptyMetrics => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "CavState", from_py_object)]
#[derive(Clone, Copy)]
struct PyCavState {
    #[pyo3(get, set)]
    x: f64,
    #[pyo3(get, set)]
    v: f64,
}

#[pymethods]
impl PyCavState {
    #[new]
    fn new(x: f64, v: f64) -> Self {
        Self { x, v }
    }

    fn __repr__(&self) -> String {
        format!("CavState(x={}, v={})", self.x, self.v)
    }
}

impl From<PyCavState> for CavState {
    fn from(s: PyCavState) -> Self {
        CavState::new(s.x, s.v)
    }
}

impl From<CavState> for PyCavState {
    fn from(s: CavState) -> Self {
        Self { x: s.x, v: s.v }
    }
}

/// Reference trajectory from the unconstrained problem.
#[pyclass(name = "Plan", frozen)]
struct PyPlan {
    inner: UnconstrainedPlan,
}

#[pymethods]
impl PyPlan {
    #[getter]
    fn a(&self) -> f64 {
        self.inner.a
    }
    #[getter]
    fn b(&self) -> f64 {
        self.inner.b_coef
    }
    #[getter]
    fn tf(&self) -> f64 {
        self.inner.tf
    }
    #[getter]
    fn v_terminal(&self) -> f64 {
        self.inner.v_terminal
    }

    /// `(u_ref, v_ref)` at time `t` after arrival.
    fn reference(&self, t: f64) -> (f64, f64) {
        ocbf::planner::eval_ref(&self.inner, t)
    }

    fn residuals(&self, length: f64, beta: f64) -> (f64, f64) {
        self.inner.residuals(length, beta)
    }
}

#[pyclass(name = "SimConfig", skip_from_py_object)]
#[derive(Clone)]
struct PySimConfig {
    inner: SimConfig,
}

fn parse_mode(s: &str) -> PyResult<Mode> {
    match s {
        "time" | "time_driven" => Ok(Mode::TimeDriven),
        "event" | "event_triggered" => Ok(Mode::EventTriggered),
        _ => Err(PyValueError::new_err(format!("unknown mode {s:?}"))),
    }
}

#[pymethods]
impl PySimConfig {
    #[new]
    #[pyo3(signature = (mode = "event", alpha = 0.25, beta = None, s_x = 2.0, s_v = 0.5, cav_count = 20, seed = 0, noise = false, arrival_rate = 0.1, dt = 0.05))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        mode: &str,
        alpha: f64,
        beta: Option<f64>,
        s_x: f64,
        s_v: f64,
        cav_count: usize,
        seed: u64,
        noise: bool,
        arrival_rate: f64,
        dt: f64,
    ) -> PyResult<Self> {
        let inner = SimConfig {
            mode: parse_mode(mode)?,
            alpha,
            beta,
            s_default: BoundVector::new(s_x, s_v),
            cav_count,
            rng_seed: seed,
            noise: noise.then(NoiseConfig::default),
            arrival_rate,
            dt,
            ..SimConfig::default()
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: config_from_str(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        config_to_string(&self.inner).map_err(to_py)
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }
    #[setter]
    fn set_mode(&mut self, m: &str) -> PyResult<()> {
        self.inner.mode = parse_mode(m)?;
        Ok(())
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.rng_seed
    }
    #[setter]
    fn set_seed(&mut self, s: u64) {
        self.inner.rng_seed = s;
    }
    #[getter]
    fn cav_count(&self) -> usize {
        self.inner.cav_count
    }
    #[setter]
    fn set_cav_count(&mut self, n: usize) {
        self.inner.cav_count = n;
    }
    #[getter]
    fn bounds(&self) -> (f64, f64) {
        (self.inner.s_default.s_x, self.inner.s_default.s_v)
    }
    #[setter]
    fn set_bounds(&mut self, s: (f64, f64)) {
        self.inner.s_default = BoundVector::new(s.0, s.1);
    }
    #[getter]
    fn record_traces(&self) -> bool {
        self.inner.record_traces
    }
    #[setter]
    fn set_record_traces(&mut self, on: bool) {
        self.inner.record_traces = on;
    }

    /// `"component"` or `"joint"`.
    #[setter]
    fn set_min_mode(&mut self, m: &str) -> PyResult<()> {
        self.inner.min_mode = match m {
            "component" => MinMode::Componentwise,
            "joint" => MinMode::Joint,
            _ => return Err(PyValueError::new_err(format!("unknown min mode {m:?}"))),
        };
        Ok(())
    }

    /// `"bound_check"` or `"always_resolve"`.
    #[setter]
    fn set_notify(&mut self, p: &str) -> PyResult<()> {
        self.inner.notify = match p {
            "bound_check" => NotifyPolicy::BoundCheck,
            "always_resolve" => NotifyPolicy::AlwaysResolve,
            _ => return Err(PyValueError::new_err(format!("unknown notify policy {p:?}"))),
        };
        Ok(())
    }
}

/// Run-level summary.
#[pyclass(name = "RunMetrics", frozen, get_all)]
struct PyRunMetrics {
    cav_count: usize,
    avg_travel_time: f64,
    avg_half_u2: f64,
    avg_fuel: f64,
    avg_objective: f64,
    qp_solved: u64,
    qp_infeasible: u64,
    qp_invocations: u64,
    messages: u64,
    min_b1: Option<f64>,
    min_b2: Option<f64>,
    min_b3: f64,
    min_b4: f64,
    violations: u64,
    deferred_admissions: u64,
}

impl From<&ocbf::metrics::RunMetrics> for PyRunMetrics {
    fn from(m: &ocbf::metrics::RunMetrics) -> Self {
        Self {
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

#[pyclass(name = "RunResult", frozen)]
struct PyRunResult {
    inner: SimOutput,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    #[getter]
    fn metrics(&self) -> PyRunMetrics {
        (&self.inner.metrics).into()
    }

    /// Per-vehicle records as a JSON array.
    fn records_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.records).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Trace samples as `(t, id, x, v, u)` tuples.
    fn trace(&self) -> Vec<(f64, u32, f64, f64, f64)> {
        self.inner.traces.iter().map(|s| (s.t, s.id, s.x, s.v, s.u)).collect()
    }

    /// Trace, log and summary files in `dir`.
    fn write(&self, dir: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&dir)?;
        write_run_files(&dir, &self.inner).map_err(to_py)?;
        let summary = Summary {
            runs: vec![SummaryRow::from(&self.inner)],
            comparison: None,
        };
        write_summary(&dir, &summary).map_err(to_py)
    }
}

#[pyclass(name = "Comparison", frozen)]
struct PyComparison {
    inner: ocbf::io::Comparison,
}

#[pymethods]
impl PyComparison {
    #[getter]
    fn qp_ratio(&self) -> f64 {
        self.inner.qp_ratio
    }
    /// `(time, event)` totals.
    #[getter]
    fn infeasible(&self) -> (u64, u64) {
        (self.inner.infeasible[0], self.inner.infeasible[1])
    }
    #[getter]
    fn avg_travel_time(&self) -> (f64, f64) {
        (self.inner.avg_travel_time[0], self.inner.avg_travel_time[1])
    }
    /// Per-seed `(seed, qp_time, qp_event)`.
    #[getter]
    fn qp_counts(&self) -> Vec<(u64, u64, u64)> {
        self.inner.pairs.iter().map(|p| (p.seed, p.qp_time, p.qp_event)).collect()
    }
    fn report(&self) -> String {
        format_report(&self.inner)
    }
}

#[pyfunction]
fn run(py: Python<'_>, config: &PySimConfig) -> PyResult<PyRunResult> {
    let cfg = config.inner.clone();
    let out = py.detach(move || ocbf::sim::run(&cfg)).map_err(to_py)?;
    Ok(PyRunResult { inner: out })
}

/// Both schemes on each seed in `seeds`.
#[pyfunction]
fn run_paired(py: Python<'_>, config: &PySimConfig, seeds: Vec<u64>) -> PyResult<PyComparison> {
    let cfg = config.inner.clone();
    let pairs = py.detach(move || ocbf::sim::run_paired(&cfg, &seeds)).map_err(to_py)?;
    Ok(PyComparison { inner: compare(&pairs) })
}

#[pyfunction]
fn beta_from_alpha(alpha: f64) -> PyResult<f64> {
    ocbf::planner::beta_from_alpha(alpha, &ConstraintParams::default()).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (v0, beta, length = 400.0))]
fn solve_unconstrained(v0: f64, beta: f64, length: f64) -> PyResult<PyPlan> {
    Ok(PyPlan {
        inner: ocbf::planner::solve_unconstrained(v0, length, beta).map_err(to_py)?,
    })
}

#[pyfunction]
fn eval_b1(agent: PyCavState, preceding: PyCavState) -> f64 {
    ocbf::model::eval_b1(agent.into(), preceding.into(), &ConstraintParams::default())
}

#[pyfunction]
fn eval_b2(agent: PyCavState, conflict: PyCavState) -> f64 {
    ocbf::model::eval_b2(agent.into(), conflict.into(), &Geometry::default(), &ConstraintParams::default())
}

#[pyfunction]
fn step_exact(state: PyCavState, u: f64, dt: f64) -> PyCavState {
    ocbf::sim::step_exact(state.into(), u, dt, &ConstraintParams::default()).into()
}

/// `(t, "position" | "velocity")` of the first box exit, or `None`.
#[pyfunction]
#[pyo3(signature = (state, u, anchor, s_x, s_v, horizon = 60.0))]
fn first_crossing_time(
    state: PyCavState,
    u: f64,
    anchor: PyCavState,
    s_x: f64,
    s_v: f64,
    horizon: f64,
) -> Option<(f64, &'static str)> {
    ocbf::event::first_crossing_time(state.into(), u, anchor.into(), BoundVector::new(s_x, s_v), horizon).map(
        |(t, k)| {
            (
                t,
                match k {
                    EventKind::Position => "position",
                    EventKind::Velocity => "velocity",
                },
            )
        },
    )
}

#[pyfunction]
fn fuel_rate(v: f64, u: f64) -> f64 {
    ocbf::metrics::fuel_rate(v, u, &ocbf::metrics::FuelParams::default())
}

#[pymodule]
pub fn ocbf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCavState>()?;
    m.add_class::<PyPlan>()?;
    m.add_class::<PySimConfig>()?;
    m.add_class::<PyRunMetrics>()?;
    m.add_class::<PyRunResult>()?;
    m.add_class::<PyComparison>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_paired, m)?)?;
    m.add_function(wrap_pyfunction!(beta_from_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(solve_unconstrained, m)?)?;
    m.add_function(wrap_pyfunction!(eval_b1, m)?)?;
    m.add_function(wrap_pyfunction!(eval_b2, m)?)?;
    m.add_function(wrap_pyfunction!(step_exact, m)?)?;
    m.add_function(wrap_pyfunction!(first_crossing_time, m)?)?;
    m.add_function(wrap_pyfunction!(fuel_rate, m)?)?;
    Ok(())
}
