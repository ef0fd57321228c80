import json

import numpy as np
import pytest

from monompc.box import Hyperrect
from monompc.exprgraph import (
    CapacityError,
    DecompGraph,
    DecompositionError,
    DomainError,
    ExprGraph,
    GraphBuilder,
    GraphError,
    OrderingError,
    build_graph,
    check_monotone,
    differentiate,
    div,
    exp,
    interval_eval,
    interval_outputs,
    linear_split,
    maximum,
    minimum,
    power,
    synth_decomposition,
    tight_decomposition_oracle,
)
from monompc.nlp import fd_jacobian


def _xup(fn, n_x, n_u, n_p):
    return build_graph(fn, [("x", n_x), ("u", n_u), ("p", n_p)])


def test_evaluate_matches_numpy(rng):
    g = _xup(lambda x, u, p: [x[0] * x[1] + u[0], exp(-x[0]) * p[0], div(x[1], 1.0 + x[0] * x[0], 1),
                              power(x[0], 3), minimum(x[0], x[1]) - maximum(u[0], p[0])], 2, 1, 1)
    X = rng.normal(size=(50, 2))
    U = rng.normal(size=(50, 1))
    P = rng.normal(size=(50, 1))
    Y = g.evaluate(X, U, P)
    ref = np.stack([X[:, 0] * X[:, 1] + U[:, 0], np.exp(-X[:, 0]) * P[:, 0], X[:, 1] / (1 + X[:, 0] ** 2),
                    X[:, 0] ** 3, np.minimum(X[:, 0], X[:, 1]) - np.maximum(U[:, 0], P[:, 0])], axis=1)
    np.testing.assert_allclose(Y, ref, rtol=1e-14, atol=1e-14)


def test_hash_consing_and_constant_folding():
    b = GraphBuilder()
    x = b.symbol("x", 0)
    e1 = x * 2.0 + 1.0
    e2 = x * 2.0 + 1.0
    assert e1.idx == e2.idx
    c = b.const(2.0) * b.const(3.0)
    assert c.is_const and c.value == 6.0


def test_topological_order_and_groups():
    g = _xup(lambda x, u, p: [x[0] * u[0] + p[0]], 1, 1, 1)
    assert g.groups == (("x", 1), ("u", 1), ("p", 1))
    assert g.n_in == 3 and g.n_out == 1
    # children precede parents
    for i in range(g.n_nodes):
        from monompc._tape import INPUT, CONST
        if g.op[i] not in (INPUT, CONST):
            assert g.a[i] < i
            assert g.b[i] < i


def test_serialization_round_trip(rng):
    g = _xup(lambda x, u, p: [exp(x[0]) * u[0] - p[0], div(x[0], 2.0 + u[0] * u[0], 1)], 1, 1, 1)
    g2 = ExprGraph.from_json(g.to_json())
    pts = rng.normal(size=(20, 3))
    np.testing.assert_array_equal(g.eval_rows(pts), g2.eval_rows(pts))
    d = json.loads(g.to_json())
    d["version"] = 999
    with pytest.raises(GraphError):
        ExprGraph.from_dict(d)


def test_domain_errors():
    g = _xup(lambda x, u, p: [div(u[0], x[0], 1)], 1, 1, 0)
    with pytest.raises(DomainError):
        g.evaluate([-1.0], [1.0], np.zeros(0))
    g = _xup(lambda x, u, p: [power(x[0], 2, 1)], 1, 0, 0)
    with pytest.raises(DomainError):
        g.evaluate([-1.0], np.zeros(0), np.zeros(0))
    with pytest.raises(GraphError):
        power(GraphBuilder().symbol("x", 0), 0)


def _graph_suite():
    return [
        _xup(lambda x, u, p: [x[0] * x[1] * u[0] + exp(x[1] * p[0])], 2, 1, 1),
        _xup(lambda x, u, p: [div(x[0], 1.0 + x[1] * x[1], 1), power(x[0] + 3.0, 3)], 2, 0, 1),
        _xup(lambda x, u, p: [exp(-div(1.0, x[0] + 3.0, 1)) * u[0] - p[0] * x[0]], 1, 1, 1),
    ]


@pytest.mark.parametrize("gi", range(3))
def test_differentiate_matches_finite_differences(gi, rng):
    g = _graph_suite()[gi]
    jg = differentiate(g, ["x", "u", "p"])
    for _ in range(30):
        z = rng.uniform(-1, 1, g.n_in)
        J = jg.eval_rows(z[None])[0].reshape(g.n_out, g.n_in)
        Jfd = fd_jacobian(lambda v: g.eval_rows(v[None])[0], z)
        np.testing.assert_allclose(J, Jfd, rtol=1e-6, atol=1e-8)
        _, Jn = g.jac_rows(z[None])
        np.testing.assert_allclose(Jn[0], J, rtol=1e-12, atol=1e-12)


def test_interval_eval_encloses_samples(rng):
    g = _graph_suite()[0]
    box = {"x": Hyperrect([-1, 0.5], [0.5, 1.0]), "u": Hyperrect([0.0], [2.0]), "p": Hyperrect([-0.3], [0.3])}
    out = interval_outputs(g, box)
    pts = np.concatenate([box["x"].sample(rng, 5000), box["u"].sample(rng, 5000), box["p"].sample(rng, 5000)],
                         axis=1)
    Y = g.eval_rows(pts)
    assert np.all(Y >= out.lo - 1e-12) and np.all(Y <= out.hi + 1e-12)
    lo, hi = interval_eval(g, box)
    assert np.all(lo <= hi)


def test_check_monotone_signs():
    g = _xup(lambda x, u, p: [0.5 * x[0] + x[1] * u[0] + p[0], x[0] - x[1]], 2, 1, 1)
    rep = check_monotone(g, Hyperrect([0, 0], [1, 1]), Hyperrect([0.0], [1.0]), Hyperrect([-1.0], [1.0]))
    assert rep.row_monotone(0)
    assert not rep.row_monotone(1)
    assert rep.sign(1, "x", 1) == "nonpos"
    assert not rep.monotone
    assert "monotone: no" in rep.summary()


def test_linear_split():
    A = np.array([[1.0, -2.0], [0.0, 3.0]])
    Ap, Am = linear_split(A)
    np.testing.assert_array_equal(Ap + Am, A)
    assert np.all(Ap >= 0) and np.all(Am <= 0)


def test_synth_decomposition_monotone_is_dynamics(scalar_model):
    d = scalar_model.decomp
    assert d.ignores_second_copy()
    assert d.provenance == ("monotone",)


def test_synth_decomposition_bilinear_encloses(rng):
    # x+ = x - 0.5 x p + u on x in [0.5, 1], p in [0.1, 1]: decreasing in p
    g = _xup(lambda x, u, p: [x[0] - 0.5 * x[0] * p[0] + u[0]], 1, 1, 1)
    bx, bu, bp = Hyperrect([0.5], [1.0]), Hyperrect([-1.0], [1.0]), Hyperrect([0.1], [1.0])
    d = synth_decomposition(g, bx, bu, bp)
    for _ in range(50):
        lo = np.sort(rng.uniform(0.5, 1, 2))
        plo = np.sort(rng.uniform(0.1, 1, 2))
        sx, sp = Hyperrect([lo[0]], [lo[1]]), Hyperrect([plo[0]], [plo[1]])
        u = rng.uniform(-1, 1, 1)
        l, h = d.lower(sx, u, sp), d.upper(sx, u, sp)
        xs, ps = sx.sample(rng, 200), sp.sample(rng, 200)
        Y = g.evaluate(xs, np.broadcast_to(u, (200, 1)), ps)
        assert np.all(Y >= l - 1e-12) and np.all(Y <= h + 1e-12)


def test_synth_decomposition_reports_unsigned_factor():
    g = _xup(lambda x, u, p: [x[0] * p[0]], 1, 0, 1)
    with pytest.raises(DecompositionError):
        synth_decomposition(g, Hyperrect([-1.0], [1.0]), None, Hyperrect([-1.0], [1.0]))


def test_decomp_graph_serialization(cstr1, rng):
    d = DecompGraph.from_json(cstr1.decomp.to_json())
    n = d.graph.n_in
    X = cstr1.X.product(cstr1.P)
    a = X.sample(rng, 10)
    u = cstr1.U.sample(rng, 10)
    rows = np.concatenate([a[:, :5], a[:, 5:], u, a[:, :5], a[:, 5:]], axis=1)
    assert rows.shape[1] == n
    np.testing.assert_array_equal(d.graph.eval_rows(rows), cstr1.decomp.graph.eval_rows(rows))
    with pytest.raises(GraphError):
        DecompGraph.from_dict({"format": "other"})


def test_tight_oracle_errors_and_values():
    g = _xup(lambda x, u, p: [x[0] * x[0] + p[0]], 1, 0, 1)
    # minimum of x^2 + p over x in [-1, 1], p in [0, 1] is 0 (grid includes x = 0)
    assert tight_decomposition_oracle(g, np.zeros(0), [-1.0, 0.0], [1.0, 1.0])[0] == 0.0
    assert tight_decomposition_oracle(g, np.zeros(0), [1.0, 1.0], [-1.0, 0.0])[0] == 2.0
    with pytest.raises(OrderingError):
        tight_decomposition_oracle(g, np.zeros(0), [1.0, 0.0], [-1.0, 1.0])
    with pytest.raises(CapacityError):
        tight_decomposition_oracle(g, np.zeros(0), [-1.0, 0.0], [1.0, 1.0], grid_pts=2000, max_points=1000)


def test_cstr_decomposition_encloses_grid_extrema(cstr1, rng):
    """The synthesized bounds contain grid extrema of the dynamics over small boxes."""
    m = cstr1
    for _ in range(5):
        c = m.X.sample(rng, 1)[0]
        w = 0.02 * m.X.width
        bx = Hyperrect(np.maximum(c - w, m.X.lo), np.minimum(c + w, m.X.hi))
        u = m.U.sample(rng, 1)[0]
        first = np.concatenate([bx.lo, m.P.lo])
        second = np.concatenate([bx.hi, m.P.hi])
        grid_min = tight_decomposition_oracle(m.f, u, first, second, grid_pts=3)
        grid_max = tight_decomposition_oracle(m.f, u, second, first, grid_pts=3)
        assert np.all(m.decomp.lower(bx, u, m.P) <= grid_min + 1e-10)
        assert np.all(m.decomp.upper(bx, u, m.P) >= grid_max - 1e-10)
