"""Smoke test for the ocbf_py extension module."""

import math
import tempfile
from pathlib import Path

import ocbf_py


def main() -> None:
    s = ocbf_py.step_exact(ocbf_py.CavState(0.0, 10.0), 2.0, 0.1)
    assert math.isclose(s.x, 1.01) and math.isclose(s.v, 10.2)

    t, kind = ocbf_py.first_crossing_time(
        ocbf_py.CavState(0.0, 10.0), 2.0, ocbf_py.CavState(0.0, 10.0), 1.5, 0.5
    )
    assert kind == "position" and abs(t - (math.sqrt(106) - 10) / 2) < 1e-9

    beta = ocbf_py.beta_from_alpha(0.25)
    plan = ocbf_py.solve_unconstrained(17.0, beta)
    r1, r2 = plan.residuals(400.0, beta)
    assert abs(r1) < 1e-8 and abs(r2) < 1e-8
    assert abs(plan.reference(plan.tf)[0]) < 1e-9

    assert abs(ocbf_py.fuel_rate(20.0, 0.0) - 0.8283) < 1e-4
    assert ocbf_py.eval_b1(ocbf_py.CavState(0.0, 10.0), ocbf_py.CavState(30.0, 10.0)) == 12.0

    cfg = ocbf_py.SimConfig(mode="event", cav_count=6, seed=4)
    cfg.record_traces = True
    again = ocbf_py.SimConfig.from_toml(cfg.to_toml())
    assert again.seed == 4 and again.bounds == (2.0, 0.5)

    res = ocbf_py.run(cfg)
    m = res.metrics
    assert m.cav_count == 6 and m.qp_infeasible <= m.qp_solved
    assert len(res.trace()) > 0
    with tempfile.TemporaryDirectory() as d:
        res.write(Path(d))
        assert (Path(d) / "summary.json").exists()

    cmp = ocbf_py.run_paired(ocbf_py.SimConfig(cav_count=8), [0, 1, 2])
    assert all(e < t for _, t, e in cmp.qp_counts)
    assert "QP count ratio" in cmp.report()

    try:
        ocbf_py.SimConfig(alpha=1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("alpha outside [0, 1) accepted")

    print(f"ok: qp ratio {cmp.qp_ratio:.3f}, event travel {m.avg_travel_time:.2f} s")


if __name__ == "__main__":
    main()
