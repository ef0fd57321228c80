import numpy as np
import pytest

from monompc.box import Hyperrect
from monompc.models import (
    KELVIN,
    R_GAS,
    CostParams,
    CstrParams,
    build_cstr,
    linear_graph,
    model_mismatch,
    plant_step,
    rk4,
    rk4_rows,
)


def _rhs_reference(x, u, p, prm):
    """Cascade right-hand side written directly in numpy."""
    n = prm.n_R
    V = prm.V_R / n
    D = prm.V_out / V
    out = np.empty(5 * n)
    up = np.array([0.0, 0.0, 0.0, 0.0, prm.T_in])
    for i in range(n):
        cA, cB, cR, cS, T = x[5 * i:5 * i + 5]
        uA, uB, TJ = u[3 * i:3 * i + 3]
        k1, k2, q1, q2 = p[4 * i:4 * i + 4]
        r1 = k1 * np.exp(-prm.E_A1 / (R_GAS * (T + KELVIN))) * cA * cB
        r2 = k2 * np.exp(-prm.E_A2 / (R_GAS * (T + KELVIN))) * cA ** 2
        out[5 * i:5 * i + 5] = [
            D * (up[0] - cA) - r1 - 2 * r2 + uA / V,
            D * (up[1] - cB) - r1 + uB / V,
            D * (up[2] - cR) + r1,
            D * (up[3] - cS) + r2,
            D * (up[4] - T) + (q1 * r1 + q2 * r2) / prm.rho_cp + prm.kA / (prm.rho_cp * V) * (TJ - T),
        ]
        up = x[5 * i:5 * i + 5]
    return out


@pytest.mark.parametrize("n_R", [1, 2])
def test_rhs_matches_reference(n_R, rng):
    m = build_cstr(n_R)
    prm = CstrParams(n_R=n_R)
    for _ in range(20):
        x, u, p = m.X.sample(rng, 1)[0], m.U.sample(rng, 1)[0], m.P.sample(rng, 1)[0]
        np.testing.assert_allclose(m.rhs.evaluate(x, u, p), _rhs_reference(x, u, p, prm), rtol=1e-12, atol=1e-12)


def test_plant_integration_converged(cstr1, rng):
    """Halving the plant step changes the state by at most 1e-8 relative."""
    m = cstr1
    for _ in range(20):
        x, u, p = m.X.sample(rng, 1)[0], m.U.sample(rng, 1)[0], m.P.sample(rng, 1)[0]
        a = plant_step(m, x, u, p)
        b = rk4(m.rhs, x, u, p, m.dt, 2 * m.plant_substeps)
        assert np.max(np.abs(a - b) / np.maximum(np.abs(b), 1.0)) <= 1e-8


def test_rk4_rows_matches_single_rows(cstr1, rng):
    m = cstr1
    X, U, P = m.X.sample(rng, 5), m.U.sample(rng, 5), m.P.sample(rng, 5)
    rows = rk4_rows(m.rhs, X, U, P, 1.0, 8)
    for i in range(5):
        np.testing.assert_allclose(rows[i], rk4(m.rhs, X[i], U[i], P[i], 1.0, 8), rtol=1e-14)


def test_rk4_exact_for_linear_decay():
    g = linear_graph([[-1.0]], [[0.0]], [[0.0]])
    x = rk4(g, [1.0], [0.0], [0.0], 1.0, 200)
    assert abs(x[0] - np.exp(-1.0)) <= 1e-10


def test_prediction_within_margin(cstr1):
    m = cstr1
    fresh = model_mismatch(m, 2000, seed=99)
    assert np.all(fresh <= np.asarray(m.meta["margin"]))


def test_boxes_and_setpoints(cstr2):
    m = cstr2
    assert m.n_x == 10 and m.n_u == 6 and m.n_p == 8
    assert m.X.hi[3] == 0.12 and m.X.hi[4] == 70.0
    np.testing.assert_allclose(m.P.lo / m.p_nominal, 0.7)
    np.testing.assert_allclose(m.P.hi / m.p_nominal, 1.3)
    assert m.meta["x_set"][2] == 1.5 and m.meta["x_set"][7] == 1.5
    np.testing.assert_allclose(m.u_set, [0.75, 0.75, 60.0, 0.75, 0.75, 60.0])
    assert m.temperature_index == (4, 9)


def test_feed_budget_rows(cstr2):
    m = cstr2
    A, b = m.input_rows
    np.testing.assert_array_equal(b, [1.5, 1.5])
    assert m.input_feasible([0.75, 0.75, 60.0, 0.75, 0.75, 60.0])
    assert not m.input_feasible([1.0, 0.5, 60.0, 1.0, 0.5, 60.0])


def test_stage_cost_value(cstr1):
    # c_R offset, c_S weight, input tracking and budget terms evaluated by hand
    m = cstr1
    x = np.array([0.1, 0.2, 1.0, 0.05, 50.0])
    u = np.array([1.0, 1.5, 55.0])
    up = np.array([1.5, 1.5, 60.0])
    c = CostParams()
    ref = (c.q_R * 0.5 ** 2 + c.q_S * 0.05 ** 2 + c.r_feed * 0.5 ** 2 + c.r_TJ * 5.0 ** 2
           + c.rd_feed * 0.5 ** 2 + c.rd_TJ * 5.0 ** 2 + c.budget_weight * 0.5 ** 2)
    assert abs(m.stage_cost.evaluate(x, u, up)[0] - ref) <= 1e-12


def test_parameter_validation():
    with pytest.raises(ValueError):
        CstrParams(k1=-1.0)
    with pytest.raises(ValueError):
        CstrParams(uncertainty=1.0)
    with pytest.raises(ValueError):
        CstrParams.from_dict({"k3": 1.0})
    with pytest.raises(ValueError):
        CostParams.from_dict({"q": 1.0})
    assert CstrParams.from_dict(CstrParams().to_dict()) == CstrParams()


def test_with_uncertainty_resynthesizes(di_model):
    m = di_model.with_uncertainty(Hyperrect([-0.2, -0.2], [0.2, 0.2]))
    assert m.P.hi[0] == 0.2
    assert m.decomp is not di_model.decomp
