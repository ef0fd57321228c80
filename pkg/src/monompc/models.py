"""Model library: dynamics graphs, decomposition functions, boxes and costs.

Models are immutable bundles.  Discrete-time dynamics use the groups
``(x, u, p)``; stage costs use ``(x, u, u_prev)``; terminal costs use ``(x,)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from .box import Hyperrect
from .exprgraph import (
    DecompGraph,
    ExprGraph,
    GraphBuilder,
    div,
    exp,
    power,
    synth_decomposition,
)

R_GAS = 8.314  # J/(mol K)
KELVIN = 273.15
MARGIN_FACTOR = 2.0


@dataclass(frozen=True, eq=False)
class Model:
    """Discrete-time uncertain model ``x+ = f(x, u, p)`` with boxes and costs."""

    name: str
    f: ExprGraph
    decomp: DecompGraph
    X: Hyperrect
    U: Hyperrect
    P: Hyperrect
    p_nominal: np.ndarray
    x0: np.ndarray
    u_set: np.ndarray
    stage_cost: ExprGraph
    terminal_cost: ExprGraph
    state_names: tuple[str, ...]
    input_names: tuple[str, ...]
    param_names: tuple[str, ...]
    input_rows: tuple[np.ndarray, np.ndarray] | None = None  # A u <= b
    rhs: ExprGraph | None = None  # continuous-time right-hand side for the plant
    dt: float = 1.0
    plant_substeps: int = 1
    temperature_index: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def n_x(self) -> int:
        return self.f.group_size("x")

    @property
    def n_u(self) -> int:
        return self.f.group_size("u")

    @property
    def n_p(self) -> int:
        return self.f.group_size("p")

    def with_uncertainty(self, P: Hyperrect) -> "Model":
        """Same model with another parameter box (decomposition re-synthesized)."""
        P = Hyperrect(P.lo, P.hi)
        d = synth_decomposition(self.f, self.X, self.U, P)
        return replace(self, P=P, decomp=d)

    def input_feasible(self, u, tol: float = 1e-9) -> bool:
        u = np.asarray(u, dtype=float)
        if not self.U.contains_point(u, tol):
            return False
        if self.input_rows is not None:
            A, b = self.input_rows
            return bool(np.all(A @ u <= b + tol))
        return True


def plant_step(model: Model, x, u, p) -> np.ndarray:
    """True next state: the discrete map, or RK4 on the right-hand side."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    if model.rhs is None:
        xn = model.f.evaluate(x, u, p)
    else:
        xn = rk4(model.rhs, x, u, p, model.dt, model.plant_substeps)
    if not np.all(np.isfinite(xn)):
        raise FloatingPointError(f"plant produced a non-finite state from x={x.tolist()}, u={u.tolist()}")
    return xn


def rk4(rhs: ExprGraph, x, u, p, dt: float, substeps: int) -> np.ndarray:
    """Classical fixed-step RK4 over ``dt`` with ``substeps`` steps."""
    h = dt / substeps
    x = np.array(x, dtype=float)
    tail = np.concatenate([u, p])
    n = x.size
    row = np.empty((1, n + tail.size))
    row[0, n:] = tail

    def F(z):
        row[0, :n] = z
        return rhs.eval_rows(row)[0]

    for _ in range(substeps):
        k1 = F(x)
        k2 = F(x + 0.5 * h * k1)
        k3 = F(x + 0.5 * h * k2)
        k4 = F(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def rk4_rows(rhs: ExprGraph, X, U, P, dt: float, substeps: int) -> np.ndarray:
    """RK4 applied to many ``(x, u, p)`` rows at once."""
    x = np.array(X, dtype=float)
    tail = np.concatenate([np.asarray(U, dtype=float), np.asarray(P, dtype=float)], axis=1)
    h = dt / substeps

    def F(z):
        return rhs.eval_rows(np.concatenate([z, tail], axis=1))

    for _ in range(substeps):
        k1 = F(x)
        k2 = F(x + 0.5 * h * k1)
        k3 = F(x + 0.5 * h * k2)
        k4 = F(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def model_mismatch(model: Model, n_samples: int = 4000, seed: int = 0) -> np.ndarray:
    """Sampled max ``|plant - prediction|`` per state over X x U x P."""
    if model.rhs is None:
        return np.zeros(model.n_x)
    rng = np.random.default_rng(seed)
    X, U, P = model.X.sample(rng, n_samples), model.U.sample(rng, n_samples), model.P.sample(rng, n_samples)
    plant = rk4_rows(model.rhs, X, U, P, model.dt, model.plant_substeps)
    pred = model.f.eval_rows(np.concatenate([X, U, P], axis=1))
    return np.abs(plant - pred).max(axis=0)


# --------------------------------------------------------------------------
# costs


def quadratic_cost(n_x: int, n_u: int, Q, R, Rd, x_set, u_set,
                   extra: Callable | None = None, terminal_factor: float = 10.0
                   ) -> tuple[ExprGraph, ExprGraph]:
    """Stage cost over (x, u, u_prev) and terminal cost over (x,).

    Stage: (x-xs)'Q(x-xs) + (u-us)'R(u-us) + (u-u_prev)'Rd(u-u_prev) + extra(u).
    Terminal: ``terminal_factor`` times the state tracking part.
    """
    Q, R, Rd = (np.asarray(w, dtype=float).reshape(-1) for w in (Q, R, Rd))
    x_set = np.asarray(x_set, dtype=float).reshape(-1)
    u_set = np.asarray(u_set, dtype=float).reshape(-1)
    if np.any(Q < 0) or np.any(R < 0) or np.any(Rd < 0):
        raise ValueError("cost weights must be nonnegative")

    def tracking(x):
        terms = [Q[i] * power(x[i] - x_set[i], 2) for i in range(n_x) if Q[i] != 0.0]
        return sum(terms[1:], terms[0]) if terms else 0.0

    b = GraphBuilder()
    x, u, up = b.symbols("x", n_x), b.symbols("u", n_u), b.symbols("u_prev", n_u)
    total = tracking(x)
    for j in range(n_u):
        if R[j]:
            total = total + R[j] * power(u[j] - u_set[j], 2)
        if Rd[j]:
            total = total + Rd[j] * power(u[j] - up[j], 2)
    if extra is not None:
        total = total + extra(u)
    stage = b.graph([total], (("x", n_x), ("u", n_u), ("u_prev", n_u)))
    bt = GraphBuilder()
    xt = bt.symbols("x", n_x)
    term = bt.graph([terminal_factor * tracking(xt)], (("x", n_x),))
    return stage, term


# --------------------------------------------------------------------------
# linear models


def linear_graph(A, B, E, c=None) -> ExprGraph:
    """``x+ = A x + B u + E p + c`` as an expression graph."""
    A, B, E = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, E))
    n_x, n_u, n_p = A.shape[0], B.shape[1], E.shape[1]
    c = np.zeros(n_x) if c is None else np.asarray(c, dtype=float)
    b = GraphBuilder()
    x, u, p = b.symbols("x", n_x), b.symbols("u", n_u), b.symbols("p", n_p)
    outs = []
    for i in range(n_x):
        acc = b.const(c[i])
        for M, v in ((A, x), (B, u), (E, p)):
            for j, coef in enumerate(M[i]):
                if coef != 0.0:
                    acc = acc + coef * v[j]
        outs.append(acc)
    return b.graph(outs, (("x", n_x), ("u", n_u), ("p", n_p)))


def build_linear(name, A, B, E, X, U, P, Q, R, Rd=None, x0=None, x_set=None, u_set=None,
                 state_names=None, input_names=None) -> Model:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    E = np.atleast_2d(np.asarray(E, dtype=float))
    n_x, n_u, n_p = A.shape[0], B.shape[1], E.shape[1]
    f = linear_graph(A, B, E)
    d = synth_decomposition(f, X, U, P)
    x_set = np.zeros(n_x) if x_set is None else np.asarray(x_set, dtype=float)
    u_set = np.zeros(n_u) if u_set is None else np.asarray(u_set, dtype=float)
    Rd = np.zeros(n_u) if Rd is None else Rd
    stage, term = quadratic_cost(n_x, n_u, Q, R, Rd, x_set, u_set)
    return Model(
        name=name, f=f, decomp=d, X=X, U=U, P=P,
        p_nominal=P.center.copy(),
        x0=np.zeros(n_x) if x0 is None else np.asarray(x0, dtype=float),
        u_set=u_set, stage_cost=stage, terminal_cost=term,
        state_names=tuple(state_names or [f"x{i}" for i in range(n_x)]),
        input_names=tuple(input_names or [f"u{i}" for i in range(n_u)]),
        param_names=tuple(f"p{i}" for i in range(n_p)),
        meta={"A": A.tolist(), "B": B.tolist(), "E": E.tolist(), "terminal": "none",
              "partition_levels": [0, 1] if n_x > 1 else [0, 0]},
    )


def build_scalar_monotone(p_amp: float = 0.1) -> Model:
    """``x+ = 0.8 x + u + p`` on X=[-2, 2], U=[-1, 1], p in [-p_amp, p_amp]."""
    return build_linear(
        "scalar", [[0.8]], [[1.0]], [[1.0]],
        X=Hyperrect([-2.0], [2.0]), U=Hyperrect([-1.0], [1.0]), P=Hyperrect([-p_amp], [p_amp]),
        Q=[1.0], R=[0.1], x0=[1.5],
    )


def build_double_integrator(p_amp: float = 0.1) -> Model:
    """Double integrator with additive disturbance on both states."""
    return build_linear(
        "double_integrator", [[1.0, 1.0], [0.0, 1.0]], [[0.0], [1.0]], np.eye(2),
        X=Hyperrect([-10.0, -3.0], [10.0, 3.0]), U=Hyperrect([-1.0], [1.0]),
        P=Hyperrect([-p_amp, -p_amp], [p_amp, p_amp]),
        Q=[1.0, 1.0], R=[0.1], Rd=[0.0], x0=[-4.0, 0.0],
        state_names=["pos", "vel"], input_names=["acc"],
    )


# --------------------------------------------------------------------------
# CSTR cascade


@dataclass(frozen=True)
class CstrParams:
    """Physical parameters of the reactor cascade (repo-chosen defaults).

    Enthalpies are stored as released heat ``-dH > 0`` so the uncertainty box
    is ``[0.7, 1.3]`` times the nominal value for every uncertain parameter.
    """

    n_R: int = 1
    k1: float = 7.2e6  # m3/(mol h)
    k2: float = 3.0e3  # m3/(mol h)
    E_A1: float = 50_000.0  # J/mol
    E_A2: float = 30_000.0  # J/mol
    heat1: float = 60_000.0  # -dH_R1, J/mol
    heat2: float = 80_000.0  # -dH_R2, J/mol
    rho_cp: float = 1.0e4  # J/(m3 K)
    kA: float = 2.0e4  # J/(h K) per reactor
    V_R: float = 2.0  # m3, total volume
    V_out: float = 1.0  # m3/h
    T_in: float = 60.0  # degC
    T_J_min: float = 20.0
    T_J_max: float = 80.0
    T_min: float = 20.0
    T_max: float = 70.0
    c_max: float = 2.0  # mol/m3, upper box face of cA, cB, cR
    cS_max: float = 0.12
    feed_max: float = 1.5  # mol/h
    uncertainty: float = 0.3
    dt: float = 1.0  # h
    substeps: int = 4  # SSPRK3 steps per dt in the prediction model
    plant_substeps: int = 64  # RK4 steps per dt in the plant

    def __post_init__(self):
        if self.n_R < 1:
            raise ValueError("n_R must be >= 1")
        positive = ("k1", "k2", "E_A1", "E_A2", "heat1", "heat2", "rho_cp", "kA", "V_R", "V_out",
                    "dt", "c_max", "cS_max", "feed_max")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"CSTR parameter {name} must be positive")
        if not 0 <= self.uncertainty < 1:
            raise ValueError("uncertainty must lie in [0, 1)")
        if self.plant_substeps < 4 * self.substeps:
            raise ValueError("plant_substeps must be at least 4x the prediction substeps")

    @property
    def V_i(self) -> float:
        return self.V_R / self.n_R

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CstrParams":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown CSTR parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class CostParams:
    """Weights and setpoints of the CSTR stage cost (diagonal weights)."""

    q_R: float = 1.0  # weight of the last tank's c_R offset (earlier tanks scale by i/n_R)
    q_S: float = 10.0
    r_feed: float = 0.01
    r_TJ: float = 1e-4
    rd_feed: float = 0.1
    rd_TJ: float = 1e-3
    T_J_set: float = 60.0
    feed_budget: float = 1.5
    budget_weight: float = 1.0
    terminal_factor: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CostParams":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown cost parameters: {sorted(unknown)}")
        return cls(**d)


def cstr_names(n_R: int):
    xs = [f"{s}_{i + 1}" for i in range(n_R) for s in ("cA", "cB", "cR", "cS", "T")]
    us = [f"{s}_{i + 1}" for i in range(n_R) for s in ("uA", "uB", "TJ")]
    ps = [f"{s}_{i + 1}" for i in range(n_R) for s in ("k1", "k2", "heat1", "heat2")]
    return xs, us, ps


def cstr_rates(T, cA, cB, k1, k2, prm: CstrParams):
    """Reaction rates r1 = k1 exp(-E1/(R(T+273.15))) cA cB and r2 = k2 exp(...) cA^2."""
    e1 = exp(-div(prm.E_A1 / R_GAS, T + KELVIN, 1))
    e2 = exp(-div(prm.E_A2 / R_GAS, T + KELVIN, 1))
    a1 = k1 * e1
    a2 = k2 * e2
    return a1, a2, a1 * cA * cB, a2 * power(cA, 2, 1)


def _cstr_rhs_exprs(x, u, p, prm: CstrParams):
    D = prm.V_out / prm.V_i
    kav = prm.kA / (prm.rho_cp * prm.V_i)
    out = []
    for i in range(prm.n_R):
        cA, cB, cR, cS, T = x[5 * i:5 * i + 5]
        uA, uB, TJ = u[3 * i:3 * i + 3]
        k1, k2, q1, q2 = p[4 * i:4 * i + 4]
        up = x[5 * (i - 1):5 * i] if i > 0 else [0.0, 0.0, 0.0, 0.0, prm.T_in]
        _, _, r1, r2 = cstr_rates(T, cA, cB, k1, k2, prm)
        out += [
            D * (up[0] - cA) - r1 - 2.0 * r2 + uA / prm.V_i,
            D * (up[1] - cB) - r1 + uB / prm.V_i,
            D * (up[2] - cR) + r1,
            D * (up[3] - cS) + r2,
            D * (up[4] - T) + (q1 / prm.rho_cp) * r1 + (q2 / prm.rho_cp) * r2 + kav * (TJ - T),
        ]
    return out


def _cstr_euler(x, u, p, h, prm: CstrParams):
    """One explicit Euler step written with sign-definite factors."""
    D = prm.V_out / prm.V_i
    kav = prm.kA / (prm.rho_cp * prm.V_i)
    out = []
    for i in range(prm.n_R):
        cA, cB, cR, cS, T = x[5 * i:5 * i + 5]
        uA, uB, TJ = u[3 * i:3 * i + 3]
        k1, k2, q1, q2 = p[4 * i:4 * i + 4]
        up = x[5 * (i - 1):5 * i] if i > 0 else [0.0, 0.0, 0.0, 0.0, prm.T_in]
        a1, a2, r1, r2 = cstr_rates(T, cA, cB, k1, k2, prm)
        out += [
            cA * (1.0 - h * (D + a1 * cB + 2.0 * a2 * cA)) + (h * D) * up[0] + (h / prm.V_i) * uA,
            cB * (1.0 - h * (D + a1 * cA)) + (h * D) * up[1] + (h / prm.V_i) * uB,
            (1.0 - h * D) * cR + (h * D) * up[2] + h * r1,
            (1.0 - h * D) * cS + (h * D) * up[3] + h * r2,
            (1.0 - h * (D + kav)) * T + (h * D) * up[4] + (h * kav) * TJ
            + (h / prm.rho_cp) * (q1 * r1) + (h / prm.rho_cp) * (q2 * r2),
        ]
    return out


def cstr_discrete_graph(prm: CstrParams) -> ExprGraph:
    """Prediction map over one ``dt``: SSPRK3 steps built from positive-form Euler stages."""
    n_x, n_u, n_p = 5 * prm.n_R, 3 * prm.n_R, 4 * prm.n_R
    b = GraphBuilder()
    x, u, p = b.symbols("x", n_x), b.symbols("u", n_u), b.symbols("p", n_p)
    h = prm.dt / prm.substeps
    z = list(x)
    for _ in range(prm.substeps):
        e1 = _cstr_euler(z, u, p, h, prm)
        z2 = [0.75 * a + 0.25 * c for a, c in zip(z, _cstr_euler(e1, u, p, h, prm))]
        z = [(1.0 / 3.0) * a + (2.0 / 3.0) * c for a, c in zip(z, _cstr_euler(z2, u, p, h, prm))]
    return b.graph(z, (("x", n_x), ("u", n_u), ("p", n_p)))


def cstr_rhs_graph(prm: CstrParams) -> ExprGraph:
    n_x, n_u, n_p = 5 * prm.n_R, 3 * prm.n_R, 4 * prm.n_R
    b = GraphBuilder()
    x, u, p = b.symbols("x", n_x), b.symbols("u", n_u), b.symbols("p", n_p)
    return b.graph(_cstr_rhs_exprs(x, u, p, prm), (("x", n_x), ("u", n_u), ("p", n_p)))


def cstr_boxes(prm: CstrParams):
    n = prm.n_R
    X = Hyperrect(
        np.tile([0.0, 0.0, 0.0, 0.0, prm.T_min], n),
        np.tile([prm.c_max, prm.c_max, prm.c_max, prm.cS_max, prm.T_max], n),
    )
    U = Hyperrect(np.tile([0.0, 0.0, prm.T_J_min], n), np.tile([prm.feed_max, prm.feed_max, prm.T_J_max], n))
    nom = np.tile([prm.k1, prm.k2, prm.heat1, prm.heat2], n)
    P = Hyperrect((1.0 - prm.uncertainty) * nom, (1.0 + prm.uncertainty) * nom)
    return X, U, P, nom


def cstr_setpoints(prm: CstrParams, cost: CostParams):
    """Setpoints: each tank's c_R target is the stoichiometric maximum budget/flow."""
    n = prm.n_R
    cR_max = cost.feed_budget / prm.V_out
    x_set = np.tile([0.0, 0.0, cR_max, 0.0, 0.0], n)
    u_set = np.tile([cost.feed_budget / n, cost.feed_budget / n, cost.T_J_set], n)
    return x_set, u_set


def build_cstr_cost(n_R: int, cost: CostParams, prm: CstrParams | None = None):
    """Stage cost over (x, u, u_prev) and terminal cost (10x the tracking part)."""
    prm = prm or CstrParams(n_R=n_R)
    x_set, u_set = cstr_setpoints(prm, cost)
    Q = np.zeros(5 * n_R)
    for i in range(n_R):
        Q[5 * i + 2] = cost.q_R * (i + 1) / n_R
        Q[5 * i + 3] = cost.q_S
    R = np.tile([cost.r_feed, cost.r_feed, cost.r_TJ], n_R)
    Rd = np.tile([cost.rd_feed, cost.rd_feed, cost.rd_TJ], n_R)

    def budget(u):
        sA = u[0]
        sB = u[1]
        for i in range(1, n_R):
            sA = sA + u[3 * i]
            sB = sB + u[3 * i + 1]
        w = cost.budget_weight
        return w * power(sA - cost.feed_budget, 2) + w * power(sB - cost.feed_budget, 2)

    return quadratic_cost(5 * n_R, 3 * n_R, Q, R, Rd, x_set, u_set, extra=budget,
                          terminal_factor=cost.terminal_factor)


def build_cstr(n_R: int = 1, params: CstrParams | None = None, cost: CostParams | None = None) -> Model:
    prm = params if params is not None else CstrParams(n_R=n_R)
    if prm.n_R != n_R:
        prm = replace(prm, n_R=n_R)
    cost = cost or CostParams()
    X, U, P, nom = cstr_boxes(prm)
    f = cstr_discrete_graph(prm)
    d = synth_decomposition(f, X, U, P)
    stage, term = build_cstr_cost(n_R, cost, prm)
    xs, us, ps = cstr_names(n_R)
    x_set, u_set = cstr_setpoints(prm, cost)
    x0 = np.tile([0.0, 0.0, 0.0, 0.0, prm.T_in], n_R)
    rows = None
    if n_R > 1:
        A = np.zeros((2, 3 * n_R))
        A[0, 0::3] = 1.0
        A[1, 1::3] = 1.0
        rows = (A, np.array([cost.feed_budget, cost.feed_budget]))
    model = Model(
        name=f"cstr{n_R}", f=f, decomp=d, X=X, U=U, P=P, p_nominal=nom, x0=x0, u_set=u_set,
        stage_cost=stage, terminal_cost=term, state_names=tuple(xs), input_names=tuple(us),
        param_names=tuple(ps), input_rows=rows, rhs=cstr_rhs_graph(prm), dt=prm.dt,
        plant_substeps=prm.plant_substeps,
        temperature_index=tuple(5 * i + 4 for i in range(n_R)),
        meta={"params": prm.to_dict(), "cost": cost.to_dict(), "x_set": x_set.tolist(),
              "partition_levels": [0, 0]},
    )
    # the robust bounds add twice the sampled plant/prediction mismatch
    margin = MARGIN_FACTOR * model_mismatch(model)
    return replace(model, meta={**model.meta, "margin": margin.tolist()})


MODEL_BUILDERS = {
    "scalar": lambda **kw: build_scalar_monotone(**kw),
    "double_integrator": lambda **kw: build_double_integrator(**kw),
    "cstr": lambda **kw: build_cstr(**kw),
}
