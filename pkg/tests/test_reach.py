import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monompc.box import Hyperrect
from monompc.exprgraph import DecompGraph, build_graph
from monompc.reach import (
    ReachTube,
    check_decomposition,
    corner_tightness,
    mc_containment,
    mc_tube_containment,
    propagate_interval,
    propagate_tube,
    vertex_hull,
)


def test_scalar_hand_propagation(scalar_model):
    # x+ = 0.8 x + u + p, x in [0, 1], u = 0.2, p in [-0.1, 0.1] -> [0.1, 1.1]
    out = propagate_interval(scalar_model.decomp, Hyperrect([0.0], [1.0]), [0.2], scalar_model.P)
    np.testing.assert_allclose(out.lo, [0.1], atol=1e-15)
    np.testing.assert_allclose(out.hi, [1.1], atol=1e-15)


def test_double_integrator_hand_propagation(di_model):
    # pos+ = pos + vel + p0, vel+ = vel + u + p1
    box = Hyperrect([0.0, -1.0], [1.0, 0.0])
    out = propagate_interval(di_model.decomp, box, [0.5], di_model.P)
    np.testing.assert_allclose(out.lo, [-1.1, -0.6], atol=1e-15)
    np.testing.assert_allclose(out.hi, [1.1, 0.6], atol=1e-15)


def test_degenerate_box_and_zero_uncertainty(di_model):
    m = di_model.with_uncertainty(Hyperrect([0.0, 0.0], [0.0, 0.0]))
    x = np.array([1.0, -0.5])
    out = propagate_interval(m.decomp, Hyperrect(x, x), [0.3], m.P)
    np.testing.assert_allclose(out.lo, out.hi)
    np.testing.assert_allclose(out.lo, m.f.evaluate(x, [0.3], [0.0, 0.0]))


def test_linear_reach_matches_vertex_hull(di_model, rng):
    m = di_model
    for _ in range(20):
        lo = m.X.sample(rng, 1)[0]
        box = Hyperrect(lo, np.minimum(lo + rng.uniform(0, 2, 2), m.X.hi))
        u = m.U.sample(rng, 1)[0]
        assert propagate_interval(m.decomp, box, u, m.P).allclose(vertex_hull(m.f, box, u, m.P), atol=1e-12)


def test_monotone_corners_attained(scalar_model, rng):
    m = scalar_model
    box = Hyperrect([-0.5], [0.7])
    pred = propagate_interval(m.decomp, box, [0.1], m.P)
    assert corner_tightness(m.f, box, [0.1], m.P, pred) <= 1e-15


def test_mc_containment_modes(cstr1, rng):
    m = cstr1
    c = m.X.sample(rng, 1)[0]
    box = Hyperrect(np.maximum(c - 0.05 * m.X.width, m.X.lo), np.minimum(c + 0.05 * m.X.width, m.X.hi))
    u = m.U.sample(rng, 1)[0]
    pred = propagate_interval(m.decomp, box, u, m.P)
    assert mc_containment(m.f, box, u, m.P, pred, 2000, seed=3).ok
    rep = mc_containment(m.f, box, u, m.P, pred, mode="corner")
    assert rep.ok and rep.n_samples == 2 ** 9
    # a shrunken prediction must be caught
    shrunk = Hyperrect(pred.center - 0.1 * pred.width, pred.center + 0.1 * pred.width)
    assert not mc_containment(m.f, box, u, m.P, shrunk, 2000, seed=3).ok
    with pytest.raises(ValueError):
        mc_containment(m.f, box, u, m.P, pred, mode="grid")


def test_tube_and_csv_round_trip(di_model):
    m = di_model
    inputs = [[0.5], [-0.2], [0.0]]
    tube = propagate_tube(m.decomp, Hyperrect([0.0, 0.0], [0.1, 0.1]), inputs, m.P)
    assert tube.N == 3
    back = ReachTube.from_csv(tube.to_csv())
    for a, b in zip(tube.boxes, back.boxes):
        assert a.allclose(b)
    assert mc_tube_containment(m.f, tube, inputs, m.P, n_samples=500) == 0
    # widths grow by the disturbance width every step
    w = np.array([b.width for b in tube.boxes])
    assert np.all(np.diff(w[:, 1]) >= 0.2 - 1e-12)


def test_check_decomposition_passes_for_models(scalar_model, di_model, cstr1):
    for m in (scalar_model, di_model, cstr1):
        rep = check_decomposition(m.decomp, m.f, m.X, m.U, m.P, 2000)
        assert rep.ok, rep.summary()


def _scalar_decomp(fn):
    g = build_graph(fn, [("x1", 1), ("p1", 1), ("u", 1), ("x2", 1), ("p2", 1)])
    return DecompGraph.from_graph(g)


def test_check_decomposition_flags_each_condition(scalar_model):
    m = scalar_model
    # wrong diagonal
    d1 = _scalar_decomp(lambda x1, p1, u, x2, p2: [0.9 * x1[0] + u[0] + p1[0]])
    # decreasing in the first copy, increasing in the second; diagonal still 0.8 x + u + p
    d2 = _scalar_decomp(lambda x1, p1, u, x2, p2: [-x1[0] + 1.8 * x2[0] + u[0] + p1[0]])
    r1 = check_decomposition(d1, m.f, m.X, m.U, m.P, 1000)
    r2 = check_decomposition(d2, m.f, m.X, m.U, m.P, 1000)
    assert r1.failed_conditions() == [1]
    assert r2.failed_conditions() == [2, 3]
    assert "FAIL" in r2.summary()


def test_inverted_interval_is_reported(scalar_model):
    d = _scalar_decomp(lambda x1, p1, u, x2, p2: [0.8 * x2[0] + u[0] + p1[0]])
    with pytest.raises(ValueError, match="inverted"):
        propagate_interval(d, Hyperrect([0.0], [1.0]), [0.0], scalar_model.P)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=4, max_size=4), st.floats(-1.0, 1.0))
def test_linear_reach_equals_vertex_hull_property(di_model, corners, u):
    m = di_model
    c = np.array(corners)
    lo = np.minimum(c[:2], c[2:]) * m.X.hi
    hi = np.maximum(c[:2], c[2:]) * m.X.hi
    box = Hyperrect(lo, hi)
    a = propagate_interval(m.decomp, box, [u], m.P)
    b = vertex_hull(m.f, box, [u], m.P)
    np.testing.assert_allclose(a.lo, b.lo, atol=1e-10)
    np.testing.assert_allclose(a.hi, b.hi, atol=1e-10)
