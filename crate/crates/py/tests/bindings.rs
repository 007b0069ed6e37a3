use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(code: &std::ffi::CStr) {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "ocbf_py").unwrap();
        ocbf_py::ocbf_py(&m).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("ocbf_py", m).unwrap();
        if let Err(e) = py.run(code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn kinematics_and_planner() {
    with_module(
        c"
s = ocbf_py.step_exact(ocbf_py.CavState(0.0, 30.0), 1.0, 0.1)
assert abs(s.x - 3.0) < 1e-12 and s.v == 30.0
p = ocbf_py.solve_unconstrained(15.0, 0.0)
assert p.a == 0.0 and abs(p.tf - 400.0 / 15.0) < 1e-9
assert ocbf_py.first_crossing_time(ocbf_py.CavState(5.0, 0.0), 0.0, ocbf_py.CavState(5.0, 0.0), 1.0, 1.0) is None
",
    );
}

#[test]
fn simulation_round_trip() {
    with_module(
        c"
cfg = ocbf_py.SimConfig(mode='time', cav_count=3, seed=2)
r = ocbf_py.run(cfg)
assert r.mode == 'time' and r.seed == 2 and r.metrics.messages == 0
import json
assert len(json.loads(r.records_json())) == 3
try:
    cfg.mode = 'sometimes'
    raise SystemExit('bad mode accepted')
except ValueError:
    pass
",
    );
}
