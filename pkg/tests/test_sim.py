import json

import numpy as np
import pytest

from monompc.box import Hyperrect
from monompc.sim import (
    MpcController,
    UncertaintyScenario,
    batch_compare,
    closed_loop_run,
    default_partition,
    recompute_cost,
)
from monompc.ocp import RobustOcp


@pytest.mark.parametrize("mode", ["nominal", "constant-random", "worst-case-constant", "time-varying-random"])
def test_scenarios_stay_in_box(cstr1, mode):
    ps = UncertaintyScenario(mode, seed=4).realize(cstr1.P, cstr1.p_nominal, 30)
    assert ps.shape == (30, 4)
    assert np.all(ps >= cstr1.P.lo) and np.all(ps <= cstr1.P.hi)
    if mode != "time-varying-random":
        assert np.all(ps == ps[0])
    again = UncertaintyScenario(mode, seed=4).realize(cstr1.P, cstr1.p_nominal, 30)
    np.testing.assert_array_equal(ps, again)


def test_worst_case_corners(cstr1):
    hi = UncertaintyScenario("worst-case-constant").realize(cstr1.P, cstr1.p_nominal, 2)
    lo = UncertaintyScenario("worst-case-constant", corner="lo").realize(cstr1.P, cstr1.p_nominal, 2)
    np.testing.assert_array_equal(hi[0], cstr1.P.hi)
    np.testing.assert_array_equal(lo[0], cstr1.P.lo)


def test_scenario_validation():
    with pytest.raises(ValueError):
        UncertaintyScenario("gusty")
    with pytest.raises(ValueError):
        UncertaintyScenario("nominal", corner="mid")


def test_unknown_controller(di_model):
    with pytest.raises(ValueError):
        MpcController("lqr", RobustOcp.from_model(di_model, 3))


@pytest.fixture(scope="module")
def di_logs(di_model):
    scen = UncertaintyScenario("constant-random", seed=3)
    return {c: closed_loop_run(c, di_model, scen, steps=12, N=6) for c in ("nominal", "oracle", "ol", "cl")}


def test_robust_runs_feasible_and_contained(di_model, di_logs):
    for c in ("ol", "cl"):
        lg = di_logs[c]
        assert not lg.failures and not lg.rf_violations and not lg.infeasible_at_start
        assert lg.state_violation(di_model.X).max() <= 1e-7
        assert lg.input_violation(di_model).max() <= 1e-7
        assert lg.tube_violations() == []
    assert di_logs["cl"].meta["mu"] == default_partition(di_model).n_leaves


def test_logged_cost_recomputes(di_model, di_logs):
    for lg in di_logs.values():
        np.testing.assert_allclose(recompute_cost(di_model, lg), lg.stage_cost, rtol=1e-14)
        assert abs(lg.total_cost - lg.stage_cost.sum()) <= 1e-12
        np.testing.assert_allclose(lg.accumulated[-1], lg.total_cost)


def test_csv_layout(di_logs):
    text = di_logs["cl"].to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "step,pos,vel,acc,stage_cost,cost,status"
    assert len(lines) == 1 + 12 + 1
    assert lines[-1].endswith("final")
    assert di_logs["cl"].tube_csv().startswith("step,dim,lo,hi,realized\n")
    assert di_logs["cl"].timing_csv().startswith("step,solve_ms,iterations,warm_residual\n")


def test_runs_are_deterministic(di_model, di_logs):
    scen = UncertaintyScenario("constant-random", seed=3)
    again = closed_loop_run("cl", di_model, scen, steps=12, N=6)
    assert again.to_csv() == di_logs["cl"].to_csv()


def test_zero_uncertainty_oracle_equals_nominal(di_model):
    m = di_model.with_uncertainty(Hyperrect([0.0, 0.0], [0.0, 0.0]))
    scen = UncertaintyScenario("constant-random", seed=2)
    a, b = (closed_loop_run(c, m, scen, steps=8, N=5) for c in ("nominal", "oracle"))
    assert a.to_csv() == b.to_csv()
    ol = closed_loop_run("ol", m, scen, steps=8, N=5)
    assert ol.tube_violations() == [] and not ol.failures


def test_batch_compare_summary(di_model, tmp_path):
    scen = [UncertaintyScenario("constant-random", seed=s) for s in range(2)]
    s = batch_compare(["ol", "cl"], di_model, scen, steps=6, N=5, log_dir=tmp_path)
    assert set(s.rows) == {"oracle", "ol", "cl"}
    assert s.rows["oracle"]["cost_ratio"] == 100.0
    assert s.rows["ol"]["feasibility_rate"] == 1.0
    row = s.table_row()
    assert row["mu"] == 4 and row["n_R"] is None
    d = json.loads(s.to_json())
    assert "mean_solve_ms" not in json.dumps(d)
    assert (tmp_path / "cl_001.csv").exists()
    with pytest.raises(ValueError):
        batch_compare(["ol"], di_model, [])
