"""Robust optimal control problems over boxes, flattened into graph NLPs.

Variable layout of the robust problems (``n_c`` cuts, ``mu`` subregions)::

    for k = 1..N:   x_lo[k] (n_x), x_hi[k] (n_x), cut[k] (n_c)
    for k = 0..N-1: u[k][s] (n_u) for s = 0..mu-1

Step 0 is the measured state itself (parameters ``theta = [x0, u_prev]``).
Every subregion ``s`` at step ``k`` has its own input and its image must lie
in the bounding box of step ``k+1``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

from .box import Hyperrect
from .exprgraph import DecompGraph, ExprGraph, GraphBuilder, linear_split, synth_decomposition
from .models import Model
from .nlp import Block, GraphNlp, LinearRows, SolverOptions, solve
from .partition import PartitionSpec, clip_cuts, leaf_boxes
from .reach import propagate_interval

X0_TOL = 1e-7


class ConfigError(ValueError):
    """Inconsistent problem configuration."""


class InfeasibleStart(ValueError):
    """Initial state outside the state box."""


@dataclass(frozen=True)
class AffineFeedback:
    """Policy ``u = K x + v``."""

    K: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "K", np.atleast_2d(np.asarray(self.K, dtype=float)))


@dataclass(frozen=True, eq=False)
class RobustOcp:
    f: ExprGraph
    decomp: DecompGraph
    N: int
    P: Hyperrect
    X: Hyperrect
    U: Hyperrect
    stage_cost: ExprGraph
    terminal_cost: ExprGraph
    partition: PartitionSpec
    u_set: np.ndarray
    terminal: str = "relaxed"
    X_f: Hyperrect | None = None
    input_rows: tuple | None = None  # (A, b) with A u <= b
    feedback: AffineFeedback | None = None
    margin: np.ndarray | None = None  # added to both sides of every bounding row

    def __post_init__(self):
        if self.N < 1:
            raise ConfigError("horizon N must be >= 1")
        if self.terminal not in ("relaxed", "fixed", "none"):
            raise ConfigError(f"unknown terminal mode {self.terminal!r}")
        if self.terminal == "fixed" and self.X_f is None:
            raise ConfigError("fixed terminal mode needs an X_f box")
        if self.terminal == "relaxed" and self.N < 2:
            raise ConfigError("relaxed terminal mode needs N >= 2")
        if self.decomp is None:
            raise ConfigError("a decomposition function is required")
        if self.partition.n_x != self.n_x:
            raise ConfigError("partition dimension does not match the state dimension")
        m = np.zeros(self.n_x) if self.margin is None else np.asarray(self.margin, dtype=float)
        if m.shape != (self.n_x,) or np.any(m < 0):
            raise ConfigError("margin must be a nonnegative vector of length n_x")
        object.__setattr__(self, "margin", m)
        object.__setattr__(self, "u_set", np.asarray(self.u_set, dtype=float))

    @classmethod
    def from_model(cls, model: Model, N: int, partition: PartitionSpec | None = None, **kw) -> "RobustOcp":
        partition = partition or PartitionSpec.single(model.n_x)
        margin = kw.pop("margin", model.meta.get("margin"))
        if kw.get("terminal") is None:
            kw["terminal"] = model.meta.get("terminal", "relaxed")
        return cls(f=model.f, decomp=model.decomp, N=N, P=model.P, X=model.X, U=model.U,
                   stage_cost=model.stage_cost, terminal_cost=model.terminal_cost,
                   partition=partition, u_set=model.u_set, input_rows=model.input_rows,
                   margin=margin, **kw)

    @property
    def n_x(self) -> int:
        return self.f.group_size("x")

    @property
    def n_u(self) -> int:
        return self.f.group_size("u")

    @property
    def n_p(self) -> int:
        return self.f.group_size("p")

    @property
    def mu(self) -> int:
        return self.partition.n_leaves

    def with_partition(self, partition: PartitionSpec) -> "RobustOcp":
        return replace(self, partition=partition)


# --------------------------------------------------------------------------
# layout


@dataclass(frozen=True)
class Layout:
    n_x: int
    n_u: int
    n_c: int
    mu: int
    N: int

    @property
    def stride(self) -> int:
        return 2 * self.n_x + self.n_c

    @property
    def u_offset(self) -> int:
        return self.N * self.stride

    @property
    def n(self) -> int:
        return self.u_offset + self.N * self.mu * self.n_u

    def lo(self, k: int) -> np.ndarray:
        return (k - 1) * self.stride + np.arange(self.n_x)

    def hi(self, k: int) -> np.ndarray:
        return (k - 1) * self.stride + self.n_x + np.arange(self.n_x)

    def cuts(self, k: int) -> np.ndarray:
        return (k - 1) * self.stride + 2 * self.n_x + np.arange(self.n_c)

    def u(self, k: int, s: int) -> np.ndarray:
        return self.u_offset + (k * self.mu + s) * self.n_u + np.arange(self.n_u)

    def names(self, input_name: str = "u") -> list[str]:
        out = []
        for k in range(1, self.N + 1):
            out += [f"x_lo[{k}][{i}]" for i in range(self.n_x)]
            out += [f"x_hi[{k}][{i}]" for i in range(self.n_x)]
            out += [f"cut[{k}][{m}]" for m in range(self.n_c)]
        for k in range(self.N):
            for s in range(self.mu):
                out += [f"{input_name}[{k}][{s}][{j}]" for j in range(self.n_u)]
        return out

    def slices(self) -> dict:
        return {"states_and_cuts": (0, self.u_offset), "inputs": (self.u_offset, self.n)}


def layout_counts(n_x: int, n_u: int, N: int, mu: int, n_c: int, terminal: str = "relaxed",
                  n_input_rows: int = 0, feedback: bool = False, n_dg: int | None = None) -> dict:
    """Closed-form variable and row counts of the robust NLP."""
    n = N * (2 * n_x + n_c) + N * mu * n_u
    copies = 1 + (N - 1) * mu  # subregion instances with rows (step 0 has a single one)
    bounding = 2 * n_x * copies
    tiling = 2 * n_c * N
    term = {"relaxed": 2 * n_x * mu, "fixed": 2 * n_x, "none": 0}[terminal]
    if feedback:
        dg = (2 * n_x + 2 * n_u + n_input_rows) if n_dg is None else n_dg
        extra = dg * copies
    else:
        extra = n_input_rows * copies
    return {"n": n, "m_eq": (mu - 1) * n_u, "m_in": bounding + tiling + term + extra,
            "bounding": bounding, "tiling": tiling, "terminal": term}


# --------------------------------------------------------------------------
# helpers for assembling rows


class _RowSet:
    def __init__(self, n: int, n_theta: int):
        self.n, self.n_theta = n, n_theta
        self.A: list[dict] = []
        self.B: list[dict] = []
        self.b: list[float] = []
        self.tags: list[str] = []

    def add(self, tag: str, z: dict | None = None, theta: dict | None = None, const: float = 0.0) -> int:
        self.A.append(z or {})
        self.B.append(theta or {})
        self.b.append(float(const))
        self.tags.append(tag)
        return len(self.b) - 1

    def linear(self) -> LinearRows:
        m = len(self.b)
        A = np.zeros((m, self.n))
        B = np.zeros((m, self.n_theta))
        for i, (za, tb) in enumerate(zip(self.A, self.B)):
            for j, c in za.items():
                A[i, j] += c
            for j, c in tb.items():
                B[i, j] += c
        return LinearRows(A, B, np.array(self.b, dtype=float))


class _BlockBuilder:
    """Collects instances of one graph; arguments are ('z', i), ('t', j) or ('c', value)."""

    def __init__(self, graph: ExprGraph, n: int, n_theta: int, tag: str):
        self.graph, self.n, self.n_theta, self.tag = graph, n, n_theta, tag
        self.args: list[list[int]] = []
        self.rows: list[list[int]] = []
        self.coef: list[list[float]] = []
        self.consts: list[float] = []

    def const(self, v: float) -> int:
        self.consts.append(float(v))
        return self.n + self.n_theta + len(self.consts) - 1

    def theta(self, j: int) -> int:
        return self.n + int(j)

    def add(self, args, rows, coef) -> None:
        args = [int(a) for a in args]
        if len(args) != self.graph.n_in:
            raise ValueError(f"{self.tag}: {len(args)} arguments for a graph with {self.graph.n_in} inputs")
        self.args.append(args)
        self.rows.append([int(r) for r in rows])
        self.coef.append([float(c) for c in coef])

    def block(self) -> Block:
        return Block(self.graph, np.array(self.args, dtype=np.int64).reshape(-1, self.graph.n_in),
                     np.array(self.consts), np.array(self.rows, dtype=np.int64).reshape(-1, self.graph.n_out),
                     np.array(self.coef).reshape(-1, self.graph.n_out), self.tag)


def _check_x0(ocp_X: Hyperrect, x0) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != ocp_X.n:
        raise InfeasibleStart(f"x0 has length {x0.size}, expected {ocp_X.n}")
    if not ocp_X.contains_point(x0, X0_TOL):
        exc = ocp_X.excess(Hyperrect(x0, x0))
        raise InfeasibleStart(f"x0 lies outside the state box (max excess {exc.max():.3e} "
                              f"in dimension {int(np.argmax(exc))})")
    return ocp_X.clip(x0)


# --------------------------------------------------------------------------
# feedback helpers


def feedback_dynamics(ocp: RobustOcp) -> tuple[ExprGraph, Hyperrect]:
    """Closed-loop map ``f(x, K x + v, p)`` over groups (x, u=v, p) and the box of ``v``."""
    K = ocp.feedback.K
    n_x, n_u, n_p = ocp.n_x, ocp.n_u, ocp.n_p
    if K.shape != (n_u, n_x):
        raise ConfigError(f"feedback gain must have shape {(n_u, n_x)}, got {K.shape}")
    b = GraphBuilder()
    x, v, p = b.symbols("x", n_x), b.symbols("u", n_u), b.symbols("p", n_p)
    u = []
    for i in range(n_u):
        acc = v[i]
        for j in range(n_x):
            if K[i, j] != 0.0:
                acc = acc + K[i, j] * x[j]
        u.append(acc)
    outs = ocp.f.apply(b, {"x": x, "u": u, "p": p})
    g = b.graph(outs, (("x", n_x), ("u", n_u), ("p", n_p)))
    Kp, Km = linear_split(K)
    vlo = ocp.U.lo - (Kp @ ocp.X.hi + Km @ ocp.X.lo)
    vhi = ocp.U.hi - (Kp @ ocp.X.lo + Km @ ocp.X.hi)
    return g, Hyperrect(vlo, vhi)


def feedback_constraint_decomp(ocp: RobustOcp) -> DecompGraph:
    """Decomposition of the constraints ``g(x, v) <= 0`` under ``u = K x + v``.

    Rows: K x + v <= U_hi, U_lo <= K x + v, x <= X_hi, X_lo <= x, and the input
    polytope A (K x + v) <= b when present.
    """
    K = ocp.feedback.K
    n_x, n_u = ocp.n_x, ocp.n_u
    b = GraphBuilder()
    x1, _p1, v = b.symbols("x1", n_x), b.symbols("p1", 0), b.symbols("u", n_u)
    x2, _p2 = b.symbols("x2", n_x), b.symbols("p2", 0)

    def split_row(row, const, vcoef):
        rp, rm = linear_split(row[None, :])
        acc = b.const(const)
        for j in range(n_x):
            if rp[0, j]:
                acc = acc + rp[0, j] * x1[j]
            if rm[0, j]:
                acc = acc + rm[0, j] * x2[j]
        for j in range(n_u):
            if vcoef[j]:
                acc = acc + vcoef[j] * v[j]
        return acc

    outs = []
    eye = np.eye(n_u)
    for i in range(n_u):
        outs.append(split_row(K[i], -ocp.U.hi[i], eye[i]))
        outs.append(split_row(-K[i], ocp.U.lo[i], -eye[i]))
    for j in range(n_x):
        outs.append(x1[j] - ocp.X.hi[j])
        outs.append(ocp.X.lo[j] - x2[j])
    if ocp.input_rows is not None:
        Au, bu = ocp.input_rows
        M = Au @ K
        for r in range(Au.shape[0]):
            outs.append(split_row(M[r], -bu[r], Au[r]))
    g = b.graph(outs, (("x1", n_x), ("p1", 0), ("u", n_u), ("x2", n_x), ("p2", 0)))
    return DecompGraph(g, ("linear-split",) * len(outs), n_x, n_u, 0)


def feedback_cost(ocp: RobustOcp) -> ExprGraph:
    """``l(x, K x + v, K xp + vp)`` over groups (x, u=v, xp, vp)."""
    K = ocp.feedback.K
    n_x, n_u = ocp.n_x, ocp.n_u
    b = GraphBuilder()
    x, v = b.symbols("x", n_x), b.symbols("u", n_u)
    xp, vp = b.symbols("xp", n_x), b.symbols("vp", n_u)

    def pol(xx, vv):
        out = []
        for i in range(n_u):
            acc = vv[i]
            for j in range(n_x):
                if K[i, j] != 0.0:
                    acc = acc + K[i, j] * xx[j]
            out.append(acc)
        return out

    outs = ocp.stage_cost.apply(b, {"x": x, "u": pol(x, v), "u_prev": pol(xp, vp)})
    return b.graph(outs, (("x", n_x), ("u", n_u), ("xp", n_x), ("vp", n_u)))


# --------------------------------------------------------------------------
# robust NLPs


def _build_robust(ocp: RobustOcp, x0, u_prev=None, feedback: bool = False) -> GraphNlp:
    x0 = _check_x0(ocp.X, x0)
    n_x, n_u, N = ocp.n_x, ocp.n_u, ocp.N
    spec = ocp.partition
    mu, n_c = spec.n_leaves, spec.n_cuts
    L = Layout(n_x, n_u, n_c, mu, N)
    n, n_theta = L.n, n_x + n_u
    u_prev = ocp.u_set if u_prev is None else np.asarray(u_prev, dtype=float)
    theta = np.concatenate([x0, u_prev])
    ix_uprev = n + n_x + np.arange(n_u)

    if feedback:
        if ocp.feedback is None:
            raise ConfigError("feedback variant needs a feedback policy")
        fk, vbox = feedback_dynamics(ocp)
        try:
            dec = synth_decomposition(fk, ocp.X, vbox, ocp.P)
        except Exception as e:  # noqa: BLE001 - surface as configuration problem
            raise ConfigError(f"cannot decompose the closed-loop map: {e}") from e
        dg = feedback_constraint_decomp(ocp)
        cost_graph = feedback_cost(ocp)
        in_lo, in_hi = vbox.lo, vbox.hi
        in_name = "v"
    else:
        dec = ocp.decomp
        cost_graph = ocp.stage_cost
        in_lo, in_hi = ocp.U.lo, ocp.U.hi
        in_name = "u"

    lb = np.empty(n)
    ub = np.empty(n)
    for k in range(1, N + 1):
        lb[L.lo(k)] = ocp.X.lo
        ub[L.lo(k)] = ocp.X.hi
        lb[L.hi(k)] = ocp.X.lo
        ub[L.hi(k)] = ocp.X.hi
        lb[L.cuts(k)] = ocp.X.lo[spec.cut_axes]
        ub[L.cuts(k)] = ocp.X.hi[spec.cut_axes]
        for s in range(mu):
            lb[L.u(k - 1, s)] = in_lo
            ub[L.u(k - 1, s)] = in_hi

    def source_args(k: int) -> np.ndarray:
        """Argument indices of the partition sources [lo, hi, cuts] at step k."""
        if k == 0:
            th = n + np.arange(n_x)
            return np.concatenate([th, th, n + spec.cut_axes])
        return np.concatenate([L.lo(k), L.hi(k), L.cuts(k)])

    lo_src, hi_src = spec.leaf_lo_sources, spec.leaf_hi_sources
    rows_in = _RowSet(n, n_theta)
    rows_eq = _RowSet(n, n_theta)

    # bounding rows
    bb = _BlockBuilder(dec.graph, n, n_theta, "bounding")
    plo = [bb.const(v) for v in ocp.P.lo]
    phi = [bb.const(v) for v in ocp.P.hi]
    w = ocp.margin
    # every subregion of step 0 is the point x0 and shares the first input, so only
    # subregion 0 carries rows there (the other copies would be exact duplicates)
    for k in range(N):
        src = source_args(k)
        for s in range(1 if k == 0 else mu):
            leaf_lo, leaf_hi = src[lo_src[s]], src[hi_src[s]]
            uu = L.u(k, s)
            up = [rows_in.add(f"bound_hi[{k}][{s}][{i}]", {int(L.hi(k + 1)[i]): 1.0}, None, -w[i])
                  for i in range(n_x)]
            bb.add(np.concatenate([leaf_hi, phi, uu, leaf_lo, plo]).astype(int), up, -np.ones(n_x))
            lo_rows = [rows_in.add(f"bound_lo[{k}][{s}][{i}]", {int(L.lo(k + 1)[i]): -1.0}, None, -w[i])
                       for i in range(n_x)]
            bb.add(np.concatenate([leaf_lo, plo, uu, leaf_hi, phi]).astype(int), lo_rows, np.ones(n_x))
    blocks_in = [bb.block()]

    # tiling rows
    for k in range(1, N + 1):
        src = source_args(k)
        for r, (a, b_) in enumerate(spec.tiling_rows()):
            rows_in.add(f"tiling[{k}][{r}]", {int(src[a]): 1.0, int(src[b_]): -1.0})

    # terminal rows
    if ocp.terminal == "relaxed":
        srcN = source_args(N)
        for s in range(mu):
            for i in range(n_x):
                rows_in.add(f"terminal_lo[{s}][{i}]", {int(srcN[lo_src[s][i]]): 1.0, int(L.lo(N - 1)[i]): -1.0})
                rows_in.add(f"terminal_hi[{s}][{i}]", {int(L.hi(N - 1)[i]): 1.0, int(srcN[hi_src[s][i]]): -1.0})
    elif ocp.terminal == "fixed":
        for i in range(n_x):
            rows_in.add(f"terminal_lo[{i}]", {int(L.lo(N)[i]): 1.0}, None, -ocp.X_f.lo[i])
            rows_in.add(f"terminal_hi[{i}]", {int(L.hi(N)[i]): -1.0}, None, ocp.X_f.hi[i])

    # input polytope or constraint decomposition rows
    if feedback:
        gb = _BlockBuilder(dg.graph, n, n_theta, "policy")
        for k in range(N):
            src = source_args(k)
            for s in range(1 if k == 0 else mu):
                rws = [rows_in.add(f"policy[{k}][{s}][{r}]") for r in range(dg.n_out)]
                gb.add(np.concatenate([src[hi_src[s]], L.u(k, s), src[lo_src[s]]]).astype(int), rws,
                       -np.ones(dg.n_out))
        blocks_in.append(gb.block())
    elif ocp.input_rows is not None:
        Au, bu = ocp.input_rows
        for k in range(N):
            for s in range(1 if k == 0 else mu):
                uu = L.u(k, s)
                for r in range(Au.shape[0]):
                    rows_in.add(f"inputs[{k}][{s}][{r}]", {int(uu[j]): -Au[r, j] for j in range(n_u) if Au[r, j]},
                                None, bu[r])

    # equal initial inputs
    for s in range(1, mu):
        for j in range(n_u):
            rows_eq.add(f"initial_input[{s}][{j}]", {int(L.u(0, 0)[j]): 1.0, int(L.u(0, s)[j]): -1.0})

    # objective: stage cost at both corners of every subregion, terminal cost at both bounding corners
    cb = _BlockBuilder(cost_graph, n, n_theta, "stage_cost")
    zero_x = None
    for k in range(N):
        src = source_args(k)
        for s in range(mu):
            for corner in (lo_src[s], hi_src[s]):
                xc = src[corner]
                if feedback:
                    if k == 0:
                        zero_x = zero_x or [cb.const(0.0) for _ in range(n_x)]
                        prev = list(zero_x) + list(ix_uprev)
                    else:
                        prev = list(source_args(k - 1)[corner]) + list(L.u(k - 1, s))
                    args = list(xc) + list(L.u(k, s)) + prev
                else:
                    prev = ix_uprev if k == 0 else L.u(k - 1, s)
                    args = list(xc) + list(L.u(k, s)) + list(prev)
                cb.add(args, [0], [1.0])
    tb = _BlockBuilder(ocp.terminal_cost, n, n_theta, "terminal_cost")
    tb.add(L.lo(N), [0], [1.0])
    tb.add(L.hi(N), [0], [1.0])

    nlp = GraphNlp(n, lb, ub, theta, rows_eq.linear(), rows_in.linear(), [], blocks_in,
                   [cb.block(), tb.block()], var_names=L.names(in_name),
                   eq_tags=rows_eq.tags, in_tags=rows_in.tags, layout=L.slices())
    nlp.kind = "cl-feedback" if feedback else ("cl" if mu > 1 else "ol")
    nlp.ocp = ocp
    nlp.layout_info = L
    nlp.decomp_used = dec
    return nlp


def build_cl_nlp(ocp: RobustOcp, x0, u_prev=None) -> GraphNlp:
    """Robust NLP with the configured partition (recourse through subregions)."""
    return _build_robust(ocp, x0, u_prev)


def build_ol_nlp(ocp: RobustOcp, x0, u_prev=None) -> GraphNlp:
    """Robust NLP without partitioning (one input per step)."""
    return _build_robust(ocp.with_partition(PartitionSpec.single(ocp.n_x)), x0, u_prev)


def build_cl_feedback_nlp(ocp: RobustOcp, x0, u_prev=None) -> GraphNlp:
    """Robust NLP over policy offsets ``v`` with ``u = K x + v``."""
    return _build_robust(ocp, x0, u_prev, feedback=True)


def applied_input(nlp: GraphNlp, z) -> np.ndarray:
    """First input of subregion 0 (plus the feedback term for policy problems)."""
    L = nlp.layout_info
    u = np.asarray(z)[L.u(0, 0)]
    if getattr(nlp, "kind", "") == "cl-feedback":
        x0 = nlp.theta[:L.n_x]
        u = nlp.ocp.feedback.K @ x0 + u
    return u


# --------------------------------------------------------------------------
# nominal NLP (certainty equivalence)


def build_nominal_nlp(ocp: RobustOcp, x0, p, u_prev=None) -> GraphNlp:
    """Nominal MPC with the dynamics at parameter ``p`` as equality constraints.

    Parameters are ``theta = [x0, u_prev, p]``.

    Relaxed terminal mode becomes ``x_N = x_{N-1}``; fixed mode keeps ``x_N`` in ``X_f``.
    """
    x0 = _check_x0(ocp.X, x0)
    n_x, n_u, N = ocp.n_x, ocp.n_u, ocp.N
    n = N * n_x + N * n_u
    n_theta = n_x + n_u + ocp.n_p
    u_prev = ocp.u_set if u_prev is None else np.asarray(u_prev, dtype=float)
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size != ocp.n_p:
        raise ConfigError(f"parameter vector must have length {ocp.n_p}")
    theta = np.concatenate([x0, u_prev, p])

    def xi(k):  # argument indices of x_k
        return n + np.arange(n_x) if k == 0 else (k - 1) * n_x + np.arange(n_x)

    def ui(k):
        return N * n_x + k * n_u + np.arange(n_u)

    lb = np.concatenate([np.tile(ocp.X.lo, N), np.tile(ocp.U.lo, N)])
    ub = np.concatenate([np.tile(ocp.X.hi, N), np.tile(ocp.U.hi, N)])
    rows_eq = _RowSet(n, n_theta)
    rows_in = _RowSet(n, n_theta)
    fb = _BlockBuilder(ocp.f, n, n_theta, "dynamics")
    pc = n + n_x + n_u + np.arange(ocp.n_p)
    for k in range(N):
        rws = [rows_eq.add(f"dynamics[{k}][{i}]", {int(xi(k + 1)[i]): -1.0}) for i in range(n_x)]
        fb.add(np.concatenate([xi(k), ui(k), pc]).astype(int), rws, np.ones(n_x))
    if ocp.terminal == "relaxed":
        for i in range(n_x):
            rows_eq.add(f"terminal[{i}]", {int(xi(N)[i]): 1.0, int(xi(N - 1)[i]): -1.0})
    elif ocp.terminal == "fixed":
        for i in range(n_x):
            rows_in.add(f"terminal_lo[{i}]", {int(xi(N)[i]): 1.0}, None, -ocp.X_f.lo[i])
            rows_in.add(f"terminal_hi[{i}]", {int(xi(N)[i]): -1.0}, None, ocp.X_f.hi[i])
    if ocp.input_rows is not None:
        Au, bu = ocp.input_rows
        for k in range(N):
            for r in range(Au.shape[0]):
                rows_in.add(f"inputs[{k}][{r}]", {int(ui(k)[j]): -Au[r, j] for j in range(n_u) if Au[r, j]},
                            None, bu[r])
    cb = _BlockBuilder(ocp.stage_cost, n, n_theta, "stage_cost")
    for k in range(N):
        prev = n + n_x + np.arange(n_u) if k == 0 else ui(k - 1)
        cb.add(np.concatenate([xi(k), ui(k), prev]), [0], [1.0])
    tb = _BlockBuilder(ocp.terminal_cost, n, n_theta, "terminal_cost")
    tb.add(xi(N), [0], [1.0])
    names = [f"x[{k}][{i}]" for k in range(1, N + 1) for i in range(n_x)]
    names += [f"u[{k}][{j}]" for k in range(N) for j in range(n_u)]
    nlp = GraphNlp(n, lb, ub, theta, rows_eq.linear(), rows_in.linear(), [fb.block()], [],
                   [cb.block(), tb.block()], var_names=names, eq_tags=rows_eq.tags,
                   in_tags=rows_in.tags, layout={"states": (0, N * n_x), "inputs": (N * n_x, n)})
    nlp.kind = "nominal"
    nlp.ocp = ocp
    nlp.index = (xi, ui)
    return nlp


# --------------------------------------------------------------------------
# unpacking, candidates and warm starts


@dataclass
class RobustIterate:
    boxes: list  # Hyperrect per step k = 0..N (step 0 is the point x0)
    cuts: list  # array per step k = 0..N (step 0 entries are unused)
    inputs: np.ndarray  # (N, mu, n_u)


def unpack(nlp: GraphNlp, z) -> RobustIterate:
    L = nlp.layout_info
    z = np.asarray(z, dtype=float)
    x0 = nlp.theta[:L.n_x]
    boxes = [Hyperrect(x0, x0)]
    cuts = [np.zeros(L.n_c)]
    spec = nlp.ocp.partition if L.n_c else None
    for k in range(1, L.N + 1):
        lo, hi = z[L.lo(k)], z[L.hi(k)]
        box = Hyperrect(np.minimum(lo, hi), np.maximum(lo, hi))
        boxes.append(box)
        # cuts may be out of order by solver tolerance; repair so leaves are nonempty
        cuts.append(clip_cuts(spec, z[L.cuts(k)], box) if spec is not None else np.zeros(0))
    inputs = np.array([[z[L.u(k, s)] for s in range(L.mu)] for k in range(L.N)])
    return RobustIterate(boxes, cuts, inputs)


def pack(nlp: GraphNlp, it: RobustIterate) -> np.ndarray:
    L = nlp.layout_info
    z = np.zeros(L.n)
    for k in range(1, L.N + 1):
        z[L.lo(k)] = it.boxes[k].lo
        z[L.hi(k)] = it.boxes[k].hi
        z[L.cuts(k)] = it.cuts[k]
    for k in range(L.N):
        for s in range(L.mu):
            z[L.u(k, s)] = it.inputs[k, s]
    return z


@dataclass
class WarmStart:
    z: np.ndarray
    residual: float
    working: tuple | None = None  # shifted active rows of the previous solution
    bound_state: np.ndarray | None = None


_TAG = re.compile(r"^(\w+)\[(\d+)\](.*)$")
_LEAF = re.compile(r"^\[(\d+)\](.*)$")


def _shifted_tag(tag: str, last: dict, s_star: int | None) -> str:
    """Name of the previous-solution row or variable that plays the role of ``tag`` after a shift."""
    mt = _TAG.match(tag)
    if mt is None or mt.group(1) not in last:
        return tag
    name, k, rest = mt.group(1), int(mt.group(2)), mt.group(3)
    if k + 1 > last[name]:
        return tag
    if k == 0 and s_star is not None:
        ml = _LEAF.match(rest)
        if ml is not None:
            rest = f"[{s_star}]{ml.group(2)}"
    return f"{name}[{k + 1}]{rest}"


def shift_active_set(nlp: GraphNlp, prev, s_star: int | None = 0, N: int | None = None):
    """Map the working rows and bound states of a previous solution one step forward."""
    working = getattr(prev, "working", None)
    bstate = getattr(prev, "bound_state", None)
    if working is None and bstate is None:
        return None, None
    N = nlp.layout_info.N if N is None else N
    last = {"bound_hi": N - 1, "bound_lo": N - 1, "inputs": N - 1, "policy": N - 1, "tiling": N,
            "x_lo": N, "x_hi": N, "cut": N, "u": N - 1, "v": N - 1, "x": N, "dynamics": N - 1}
    tags = list(nlp.eq_tags) + list(nlp.in_tags)
    index = {t: i for i, t in enumerate(tags)}
    new_w = None
    if working is not None:
        active = set(int(i) for i in working)
        new_w = tuple(i for i, t in enumerate(tags) if index.get(_shifted_tag(t, last, s_star), -1) in active)
    new_b = None
    if bstate is not None and len(nlp.var_names) == nlp.n:
        vindex = {v: i for i, v in enumerate(nlp.var_names)}
        new_b = np.array([bstate[vindex.get(_shifted_tag(v, last, s_star), j)]
                          for j, v in enumerate(nlp.var_names)], dtype=np.int8)
    return new_w, new_b


def constraint_residual(nlp, z) -> float:
    """Max-norm violation of rows and bounds at ``z`` (inf on evaluation failure)."""
    try:
        ce, ci = nlp.constraints(z)
    except (ArithmeticError, FloatingPointError):
        return float("inf")
    parts = [0.0]
    if ce.size:
        parts.append(float(np.max(np.abs(ce))))
    if ci.size:
        parts.append(float(np.max(-ci)))
    parts.append(float(np.max(nlp.lb - z, initial=0.0)))
    parts.append(float(np.max(z - nlp.ub, initial=0.0)))
    return max(parts)


def _policy_input(nlp, x, v):
    if getattr(nlp, "kind", "") == "cl-feedback":
        return nlp.ocp.feedback.K @ x + v
    return v


def _bounding_pair(nlp, box: Hyperrect, v):
    """(lower, upper) of the bounding rows for one subregion, margin included."""
    ocp = nlp.ocp
    dec = nlp.decomp_used
    lo = dec.graph.evaluate(box.lo, ocp.P.lo, v, box.hi, ocp.P.hi) - ocp.margin
    hi = dec.graph.evaluate(box.hi, ocp.P.hi, v, box.lo, ocp.P.lo) + ocp.margin
    return np.minimum(lo, hi), np.maximum(lo, hi)


def _images_hull(nlp, leaves, inputs) -> Hyperrect:
    los, his = [], []
    for box, v in zip(leaves, inputs):
        lo, hi = _bounding_pair(nlp, box, v)
        los.append(lo)
        his.append(hi)
    return Hyperrect(np.min(los, axis=0), np.max(his, axis=0))


def _containing_leaf(new_leaf: Hyperrect, old_leaves, prefer: int) -> int:
    tol = 1e-12 * (1.0 + np.abs(new_leaf.hi).max())
    order = [prefer] + [s for s in range(len(old_leaves)) if s != prefer]
    best, best_exc = prefer, np.inf
    for s in order:
        exc = float(old_leaves[s].excess(new_leaf).max())
        if exc <= tol:
            return s
        if exc < best_exc:
            best, best_exc = s, exc
    return best


def cold_start(nlp: GraphNlp, inputs=None) -> np.ndarray:
    """Tube rollout from x0 with constant inputs (``u_set`` by default), clipped to X."""
    ocp = nlp.ocp
    L = nlp.layout_info
    spec = ocp.partition if L.mu > 1 else PartitionSpec.single(L.n_x)
    lb_u, ub_u = nlp.lb[L.u(0, 0)], nlp.ub[L.u(0, 0)]
    if inputs is None:
        v = np.clip(ocp.u_set if getattr(nlp, "kind", "") != "cl-feedback"
                    else ocp.u_set - ocp.feedback.K @ ocp.X.center, lb_u, ub_u)
        inputs = np.tile(v, (L.N, L.mu, 1))
    x0 = nlp.theta[:L.n_x]
    boxes = [Hyperrect(x0, x0)]
    cuts = [np.zeros(L.n_c)]
    for k in range(L.N):
        nxt = _images_hull(nlp, [boxes[k]], [inputs[k, 0]])
        nxt = Hyperrect(ocp.X.clip(nxt.lo), ocp.X.clip(nxt.hi))
        boxes.append(nxt)
        cuts.append(spec.default_cuts(nxt) if L.n_c else np.zeros(0))
    return pack(nlp, RobustIterate(boxes, cuts, np.asarray(inputs, dtype=float)))


def warm_start_shift(nlp: GraphNlp, prev_z, new_x0, new_u_prev=None, prev=None) -> WarmStart:
    """Shift a solved robust iterate by one step and re-measure its residual.

    ``nlp`` is updated in place with the new parameters.  Step 0 takes the input
    of the previous step-1 subregion containing the new state, steps 1..N-2 are
    copied, step N-1 reuses the previous step-(N-1) cuts clipped into the
    previous step-N box with the inputs of the containing previous subregions,
    and the new step-N box is the hull of the resulting images.  With ``prev``
    (the previous Solution) its active set is shifted along.
    """
    s_star = 0
    ocp = nlp.ocp
    L = nlp.layout_info
    spec = ocp.partition if L.mu > 1 else PartitionSpec.single(L.n_x)
    old = unpack(nlp, prev_z)
    new_x0 = _check_x0(ocp.X, new_x0)
    u_prev = nlp.theta[L.n_x:] if new_u_prev is None else np.asarray(new_u_prev, dtype=float)
    N, mu = L.N, L.mu
    boxes = [Hyperrect(new_x0, new_x0)] + [None] * N
    cuts = [np.zeros(L.n_c)] + [None] * N
    inputs = np.zeros_like(old.inputs)
    if N == 1:
        inputs[0] = old.inputs[0]
    else:
        s_star = spec.leaf_of_point(old.boxes[1], old.cuts[1], new_x0)
        inputs[0] = old.inputs[1][s_star]
        for k in range(1, N - 1):
            boxes[k] = old.boxes[k + 1]
            cuts[k] = old.cuts[k + 1]
            inputs[k] = old.inputs[k + 1]
        # step N-1: previous step-N box cut like the previous step N-1
        bN = old.boxes[N]
        cN1 = clip_cuts(spec, old.cuts[N - 1], bN) if L.n_c else np.zeros(0)
        boxes[N - 1] = bN
        cuts[N - 1] = cN1
        old_leaves = leaf_boxes(spec, old.boxes[N - 1], old.cuts[N - 1])
        for s, leaf in enumerate(leaf_boxes(spec, bN, cN1)):
            inputs[N - 1][s] = old.inputs[N - 1][_containing_leaf(leaf, old_leaves, s)]
    # step N: hull of the images of step N-1
    prev_leaves = leaf_boxes(spec, boxes[N - 1], cuts[N - 1]) if N > 1 else [boxes[0]] * mu
    try:
        bN = _images_hull(nlp, prev_leaves, inputs[N - 1])
        bN = Hyperrect(ocp.X.clip(bN.lo), ocp.X.clip(bN.hi))
    except ArithmeticError:
        bN = old.boxes[N]
    boxes[N] = bN
    cuts[N] = clip_cuts(spec, old.cuts[N], bN) if L.n_c else np.zeros(0)
    nlp.set_params(np.concatenate([new_x0, u_prev]))
    z = pack(nlp, RobustIterate(boxes, cuts, inputs))
    working, bstate = shift_active_set(nlp, prev, s_star)
    return WarmStart(z, constraint_residual(nlp, z), working, bstate)


def nominal_params(nlp: GraphNlp) -> np.ndarray:
    ocp = nlp.ocp
    return nlp.theta[ocp.n_x + ocp.n_u:]


def nominal_warm_start(nlp: GraphNlp, prev_z, new_x0, new_u_prev, p=None, prev=None) -> WarmStart:
    """Shifted input sequence (last input repeated) rolled out through the model."""
    ocp = nlp.ocp
    N = ocp.N
    xi, ui = nlp.index
    new_x0 = _check_x0(ocp.X, new_x0)
    p = nominal_params(nlp) if p is None else np.asarray(p, dtype=float)
    z = np.empty_like(prev_z)
    xs = [new_x0] + [prev_z[xi(k)] for k in range(1, N + 1)]
    us = [prev_z[ui(k)] for k in range(N)]
    new_us = us[1:] + [us[-1]]
    nlp.set_params(np.concatenate([new_x0, new_u_prev, p]))
    x = new_x0
    for k in range(N):
        z[ui(k)] = new_us[k]
        try:
            x = np.clip(ocp.f.evaluate(x, new_us[k], p), ocp.X.lo, ocp.X.hi)
        except ArithmeticError:
            x = xs[min(k + 2, N)]
        z[xi(k + 1)] = x
    working, bstate = shift_active_set(nlp, prev, None, N)
    return WarmStart(z, constraint_residual(nlp, z), working, bstate)


def nominal_cold_start(nlp: GraphNlp) -> np.ndarray:
    ocp = nlp.ocp
    xi, ui = nlp.index
    z = np.empty(nlp.n)
    x = nlp.theta[:ocp.n_x]
    u = np.clip(ocp.u_set, ocp.U.lo, ocp.U.hi)
    for k in range(ocp.N):
        z[ui(k)] = u
        x = np.clip(ocp.f.evaluate(x, u, nominal_params(nlp)), ocp.X.lo, ocp.X.hi)
        z[xi(k + 1)] = x
    return z


# --------------------------------------------------------------------------
# terminal sets


def terminal_constraints(ocp: RobustOcp, mode: str | None = None) -> list[str]:
    """Tags of the terminal rows the NLP carries for ``mode``."""
    mode = mode or ocp.terminal
    if mode == "fixed" and ocp.X_f is None:
        raise ConfigError("fixed terminal mode needs an X_f box")
    o = replace(ocp, terminal=mode, N=max(ocp.N, 2))
    nlp = build_cl_nlp(o, o.X.center)
    return [t for t in nlp.in_tags if t.startswith("terminal")]


@dataclass
class RcisVerdict:
    verified: bool
    margin: float
    cuts: np.ndarray | None = None
    inputs: np.ndarray | None = None
    message: str = ""
    status: str = ""

    def to_dict(self) -> dict:
        return {"verified": self.verified, "margin": self.margin,
                "cuts": None if self.cuts is None else self.cuts.tolist(),
                "inputs": None if self.inputs is None else self.inputs.tolist(),
                "message": self.message, "status": self.status}


def _rcis_nlp(candidate: Hyperrect, spec: PartitionSpec, ocp: RobustOcp) -> GraphNlp:
    n_x, n_u = ocp.n_x, ocp.n_u
    mu, n_c = spec.n_leaves, spec.n_cuts
    n = n_c + mu * n_u + 1
    it = n - 1  # margin variable t
    width = np.where(candidate.width > 0, candidate.width, 0.0)
    lb = np.concatenate([candidate.lo[spec.cut_axes], np.tile(ocp.U.lo, mu), [-1.0]])
    ub = np.concatenate([candidate.hi[spec.cut_axes], np.tile(ocp.U.hi, mu), [1.0]])
    rows = _RowSet(n, 0)
    bb = _BlockBuilder(ocp.decomp.graph, n, 0, "rcis")
    src = [bb.const(v) for v in candidate.lo] + [bb.const(v) for v in candidate.hi] + list(range(n_c))
    src = np.array(src)
    plo = [bb.const(v) for v in ocp.P.lo]
    phi = [bb.const(v) for v in ocp.P.hi]
    lo_src, hi_src = spec.leaf_lo_sources, spec.leaf_hi_sources
    w = ocp.margin
    for s in range(mu):
        uu = n_c + s * n_u + np.arange(n_u)
        up = [rows.add(f"image_hi[{s}][{i}]", {it: -width[i]}, None, candidate.hi[i] - w[i]) for i in range(n_x)]
        bb.add(np.concatenate([src[hi_src[s]], phi, uu, src[lo_src[s]], plo]).astype(int), up, -np.ones(n_x))
        lo = [rows.add(f"image_lo[{s}][{i}]", {it: -width[i]}, None, -candidate.lo[i] - w[i]) for i in range(n_x)]
        bb.add(np.concatenate([src[lo_src[s]], plo, uu, src[hi_src[s]], phi]).astype(int), lo, np.ones(n_x))
    for r, (a, b_) in enumerate(spec.tiling_rows()):
        za = {}
        const = 0.0
        for idx, sign in ((a, 1.0), (b_, -1.0)):
            if idx >= 2 * n_x:
                za[idx - 2 * n_x] = za.get(idx - 2 * n_x, 0.0) + sign
            else:
                const += sign * (candidate.lo[idx] if idx < n_x else candidate.hi[idx - n_x])
        rows.add(f"tiling[{r}]", za, None, const)
    if ocp.input_rows is not None:
        Au, bu = ocp.input_rows
        for s in range(mu):
            for r in range(Au.shape[0]):
                rows.add(f"inputs[{s}][{r}]", {n_c + s * n_u + j: -Au[r, j] for j in range(n_u) if Au[r, j]},
                         None, bu[r])
    c = np.zeros(n)
    c[it] = -1.0
    return GraphNlp(n, lb, ub, np.zeros(0), LinearRows.empty(n, 0), rows.linear(), [], [bb.block()], [],
                    in_tags=rows.tags, obj_lin=c)


def verify_rcis(candidate: Hyperrect, partition: PartitionSpec, ocp: RobustOcp,
                opts: SolverOptions | None = None, seed: int = 0, n_starts: int = 6) -> RcisVerdict:
    """Search cuts and per-subregion inputs whose images stay inside ``candidate``."""
    if not ocp.X.contains(candidate, 1e-12):
        return RcisVerdict(False, -np.inf, message="candidate is not inside the state box")
    nlp = _rcis_nlp(candidate, partition, ocp)
    n_c, mu, n_u = partition.n_cuts, partition.n_leaves, ocp.n_u
    rng = np.random.default_rng(seed)
    opts = opts or SolverOptions(max_iter=100)
    best = None
    fracs = [0.5, 0.25, 0.75, 1 / 3, 2 / 3, 0.1, 0.9]
    for i in range(n_starts):
        cuts0 = partition.default_cuts(candidate, fracs[i % len(fracs)])
        if i == 0:
            u0 = np.tile(np.clip(ocp.u_set, ocp.U.lo, ocp.U.hi), mu)
        elif i == 1:
            u0 = np.tile(ocp.U.center, mu)
        else:
            u0 = np.concatenate([ocp.U.sample(rng, 1)[0] for _ in range(mu)])
        z0 = np.concatenate([cuts0, u0, [-1.0]])
        sol = solve(nlp, z0, opts)
        t = float(sol.z[-1])
        if best is None or (sol.status == "optimal" and (best[0].status != "optimal" or t > best[1])):
            best = (sol, t)
        if sol.status == "optimal" and t >= 0:
            break
    sol, t = best
    cuts = sol.z[:n_c]
    inputs = sol.z[n_c:n_c + mu * n_u].reshape(mu, n_u)
    if sol.status != "optimal":
        return RcisVerdict(False, t, cuts, inputs, f"solver status {sol.status}", sol.status)
    if t < -1e-9:
        return RcisVerdict(False, t, cuts, inputs, "images leave the candidate", sol.status)
    # independent re-check of every subregion image
    for (a, b_) in partition.tiling_rows():
        src = partition.sources(candidate, cuts)
        if src[a] - src[b_] < -1e-9:
            return RcisVerdict(False, t, cuts, inputs, "cuts out of order", sol.status)
    lo, hi = partition.leaf_corners(candidate, cuts)
    for s in range(mu):
        box = Hyperrect(np.minimum(lo[s], hi[s]), np.maximum(lo[s], hi[s]))
        img = propagate_interval(ocp.decomp, box, inputs[s], ocp.P)
        img = Hyperrect(img.lo - ocp.margin, img.hi + ocp.margin)
        if not candidate.contains(img, 1e-9):
            return RcisVerdict(False, t, cuts, inputs, f"re-check failed for subregion {s}", sol.status)
        if not ocp.U.contains_point(inputs[s], 1e-9):
            return RcisVerdict(False, t, cuts, inputs, "input outside U", sol.status)
        if ocp.input_rows is not None:
            Au, bu = ocp.input_rows
            if np.any(Au @ inputs[s] > bu + 1e-9):
                return RcisVerdict(False, t, cuts, inputs, "input polytope violated", sol.status)
    return RcisVerdict(True, t, cuts, inputs, "verified", sol.status)
