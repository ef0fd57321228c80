import numpy as np
import pytest

from monompc.box import Hyperrect
from monompc.exprgraph import build_graph, synth_decomposition
from monompc.models import build_linear, quadratic_cost
from monompc.nlp import solve
from monompc.ocp import (
    ConfigError,
    RobustIterate,
    RobustOcp,
    applied_input,
    build_cl_nlp,
    build_nominal_nlp,
    build_ol_nlp,
    cold_start,
    constraint_residual,
    layout_counts,
    pack,
    terminal_constraints,
    unpack,
    verify_rcis,
    warm_start_shift,
)
from monompc.partition import PartitionSpec


def _counts(nlp):
    return nlp.n, nlp.m_eq, nlp.m_in


@pytest.mark.parametrize("levels,terminal", [([], "relaxed"), ([0], "relaxed"), ([0, 1], "none"),
                                             ([1, 0], "relaxed")])
def test_layout_counts_match_built_nlp(di_model, levels, terminal):
    spec = PartitionSpec.from_levels(levels, 2)
    ocp = RobustOcp.from_model(di_model, 5, spec, terminal=terminal)
    nlp = build_cl_nlp(ocp, [0.0, 0.0])
    c = layout_counts(2, 1, 5, spec.n_leaves, spec.n_cuts, terminal)
    assert _counts(nlp) == (c["n"], c["m_eq"], c["m_in"])
    assert len(nlp.var_names) == nlp.n and len(nlp.in_tags) == nlp.m_in


def test_relaxed_terminal_row_count(cstr1):
    spec = PartitionSpec.from_levels([0, 0], 5)
    ocp = RobustOcp.from_model(cstr1, 4, spec, terminal="relaxed")
    assert len(terminal_constraints(ocp)) == 2 * 5 * 4
    assert len(terminal_constraints(ocp, "none")) == 0
    with pytest.raises(ConfigError):
        terminal_constraints(ocp, "fixed")


def test_config_errors(di_model):
    with pytest.raises(ConfigError):
        RobustOcp.from_model(di_model, 0)
    with pytest.raises(ConfigError):
        RobustOcp.from_model(di_model, 3, terminal="fixed")
    with pytest.raises(ConfigError):
        RobustOcp.from_model(di_model, 3, PartitionSpec.single(3))
    with pytest.raises(ConfigError):
        RobustOcp.from_model(di_model, 3, margin=[-1.0, 0.0])


def test_ol_equals_cl_with_one_subregion(di_model):
    ocp = RobustOcp.from_model(di_model, 6)
    ol = build_ol_nlp(ocp, [-3.0, 0.5])
    cl = build_cl_nlp(ocp, [-3.0, 0.5])
    assert _counts(ol) == _counts(cl)
    a, b = solve(ol, cold_start(ol)), solve(cl, cold_start(cl))
    assert a.ok and b.ok
    assert abs(a.objective - b.objective) <= 1e-8


def test_open_loop_plan_embeds_into_partitioned_problem(di_model):
    """An OL optimum lifted with degenerate cuts is feasible for the two-subregion problem."""
    x0 = [-4.0, 1.0]
    ol = build_ol_nlp(RobustOcp.from_model(di_model, 6), x0)
    a = solve(ol, cold_start(ol))
    assert a.ok
    cl = build_cl_nlp(RobustOcp.from_model(di_model, 6, PartitionSpec.from_levels([1], 2)), x0)
    it = unpack(ol, a.z)
    cuts = [np.zeros(1)] + [np.array([b.lo[1]]) for b in it.boxes[1:]]
    lifted = pack(cl, RobustIterate(it.boxes, cuts, np.repeat(it.inputs, 2, axis=1)))
    assert constraint_residual(cl, lifted) <= 1e-9


def test_solution_is_robustly_feasible(di_model):
    spec = PartitionSpec.from_levels([0, 1], 2)
    ocp = RobustOcp.from_model(di_model, 5, spec)
    nlp = build_cl_nlp(ocp, [-4.0, 0.0])
    sol = solve(nlp, cold_start(nlp))
    assert sol.ok
    it = unpack(nlp, sol.z)
    for b in it.boxes:
        assert di_model.X.contains(b, 1e-8)
    assert np.all(np.abs(it.inputs) <= 1 + 1e-9)
    u = applied_input(nlp, sol.z)
    assert u.shape == (1,)


def test_warm_start_residual_along_closed_loop(di_model):
    """Shifted candidates stay feasible while the plant follows any admissible disturbance."""
    rng = np.random.default_rng(7)
    ocp = RobustOcp.from_model(di_model, 6, PartitionSpec.from_levels([0, 1], 2))
    x = np.array([-4.0, 0.0])
    nlp = build_cl_nlp(ocp, x)
    sol = solve(nlp, cold_start(nlp))
    for _ in range(20):
        u = applied_input(nlp, sol.z)
        x = di_model.f.evaluate(x, u, di_model.P.sample(rng, 1)[0])
        ws = warm_start_shift(nlp, sol.z, x, u, prev=sol)
        assert ws.residual <= 1e-8
        sol = solve(nlp, ws.z, warm=ws)
        assert sol.ok


def test_zero_uncertainty_shift_is_exact(di_model):
    m = di_model.with_uncertainty(Hyperrect([0.0, 0.0], [0.0, 0.0]))
    ocp = RobustOcp.from_model(m, 5)
    nlp = build_ol_nlp(ocp, [-2.0, 0.0])
    sol = solve(nlp, cold_start(nlp))
    u = applied_input(nlp, sol.z)
    x1 = m.f.evaluate([-2.0, 0.0], u, [0.0, 0.0])
    ws = warm_start_shift(nlp, sol.z, x1, u)
    assert ws.residual <= 1e-12
    assert constraint_residual(nlp, ws.z) == ws.residual


def test_nominal_nlp_parameters(di_model):
    ocp = RobustOcp.from_model(di_model, 4)
    nlp = build_nominal_nlp(ocp, [0.0, 0.0], [0.05, -0.05])
    assert nlp.theta.size == 2 + 1 + 2
    with pytest.raises(ConfigError):
        build_nominal_nlp(ocp, [0.0, 0.0], [0.0])


def test_audit_lists_layout(di_model):
    nlp = build_cl_nlp(RobustOcp.from_model(di_model, 2, PartitionSpec.from_levels([0], 2)), [0.0, 0.0])
    text = nlp.audit()
    assert text.startswith(f"variables {nlp.n}\n")
    assert "x_lo[1][0]" in text and "cut[2][0]" in text
    assert f"inequalities {nlp.m_in}" in text


# --------------------------------------------------------------------------
# robust control invariant boxes


def _ocp_for(f, X, U, P, mu_levels=()):
    d = synth_decomposition(f, X, U, P)
    stage, term = quadratic_cost(1, 1, [1.0], [0.1], [0.0], [0.0], [0.0])
    return RobustOcp(f=f, decomp=d, N=2, P=P, X=X, U=U, stage_cost=stage, terminal_cost=term,
                     partition=PartitionSpec.from_levels(list(mu_levels), 1), u_set=np.zeros(1))


def test_rcis_scalar_stable_system():
    # x+ = 0.5 x + u + p, p in [-0.1, 0.1]: u = 0 maps [-0.2, 0.2] into [-0.2, 0.2]
    m = build_linear("s", [[0.5]], [[1.0]], [[1.0]], Hyperrect([-2.0], [2.0]), Hyperrect([-1.0], [1.0]),
                     Hyperrect([-0.1], [0.1]), [1.0], [0.1])
    ocp = RobustOcp.from_model(m, 2)
    v = verify_rcis(Hyperrect([-0.2], [0.2]), PartitionSpec.single(1), ocp)
    assert v.verified
    assert abs(v.inputs[0, 0]) <= 1e-6  # the symmetric box forces u = 0
    assert v.to_dict()["verified"] is True


def test_rcis_rejects_box_below_disturbance_width():
    f = build_graph(lambda x, u, p: [x[0] + u[0] + p[0]], [("x", 1), ("u", 1), ("p", 1)])
    ocp = _ocp_for(f, Hyperrect([-2.0], [2.0]), Hyperrect([-0.01], [0.01]), Hyperrect([-0.1], [0.1]))
    v = verify_rcis(Hyperrect([-0.05], [0.05]), PartitionSpec.single(1), ocp)
    assert not v.verified


def test_rcis_recourse_verifies_what_one_input_cannot():
    # x+ = x + u x + p on [1, 3], U = [-0.5, 0.5], p in [-0.1, 0.1]: one input needs
    # 1 + u >= 1.1 and 3 (1 + u) <= 2.9 at once; two subregions split the demands
    f = build_graph(lambda x, u, p: [x[0] * (1.0 + u[0]) + p[0]], [("x", 1), ("u", 1), ("p", 1)])
    X, U, P = Hyperrect([0.0], [4.0]), Hyperrect([-0.5], [0.5]), Hyperrect([-0.1], [0.1])
    cand = Hyperrect([1.0], [3.0])
    one = verify_rcis(cand, PartitionSpec.single(1), _ocp_for(f, X, U, P))
    two = verify_rcis(cand, PartitionSpec.from_levels([0], 1), _ocp_for(f, X, U, P, [0]))
    assert not one.verified
    assert two.verified
    c = two.cuts[0]
    assert (1.1 / (1 - 0.1 / 3)) - 1e-6 <= c <= 2.9 / 1.1 + 1e-6


def test_rcis_candidate_outside_state_box(di_model):
    ocp = RobustOcp.from_model(di_model, 2)
    v = verify_rcis(Hyperrect([-20.0, 0.0], [0.0, 1.0]), PartitionSpec.single(2), ocp)
    assert not v.verified and "not inside" in v.message
