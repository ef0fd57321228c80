"""Smooth NLPs and a dense SQP solver.

    min f(z)  s.t.  c_eq(z) = 0,  c_in(z) >= 0,  lb <= z <= ub

``GraphNlp`` assembles constraints and objective from expression-graph blocks
(one graph, many argument instances) plus linear rows; ``FunctionNlp`` wraps
plain callables.  ``solve`` runs SQP with a damped BFGS (or objective-only)
Hessian, the active-set QP of :mod:`monompc.qp`, and an l1-merit line search.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exprgraph import DomainError, ExprGraph, differentiate
from .qp import solve_qp

STATUSES = ("optimal", "max-iter", "infeasible-detected", "line-search-failure")


class NlpProblem:
    """Interface used by the solver; subclasses fill the evaluation methods."""

    n: int
    m_eq: int
    m_in: int
    lb: np.ndarray
    ub: np.ndarray
    var_names: tuple[str, ...] = ()
    eq_tags: tuple[str, ...] = ()
    in_tags: tuple[str, ...] = ()

    def objective(self, z) -> float:
        raise NotImplementedError

    def gradient(self, z) -> np.ndarray:
        raise NotImplementedError

    def constraints(self, z) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def jacobians(self, z) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def hessian_objective(self, z) -> np.ndarray | None:
        return None


class FunctionNlp(NlpProblem):
    """NLP from callables; Jacobians default to central differences when omitted."""

    def __init__(self, n, f, grad=None, c_eq=None, c_in=None, jac_eq=None, jac_in=None,
                 lb=None, ub=None, hess=None, m_eq=None, m_in=None):
        self.n = int(n)
        self.lb = np.full(self.n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
        self.ub = np.full(self.n, np.inf) if ub is None else np.asarray(ub, dtype=float)
        self._f, self._grad, self._hess = f, grad, hess
        self._ceq = c_eq or (lambda z: np.zeros(0))
        self._cin = c_in or (lambda z: np.zeros(0))
        self._jeq, self._jin = jac_eq, jac_in
        z0 = np.clip(np.zeros(self.n), self.lb, self.ub)
        self.m_eq = len(self._ceq(z0)) if m_eq is None else m_eq
        self.m_in = len(self._cin(z0)) if m_in is None else m_in
        self.var_names = tuple(f"z{i}" for i in range(self.n))
        self.eq_tags = tuple(f"eq{i}" for i in range(self.m_eq))
        self.in_tags = tuple(f"in{i}" for i in range(self.m_in))

    def objective(self, z):
        return float(self._f(z))

    def gradient(self, z):
        if self._grad is not None:
            return np.asarray(self._grad(z), dtype=float)
        return fd_jacobian(lambda v: np.array([self._f(v)]), z)[0]

    def constraints(self, z):
        return np.asarray(self._ceq(z), dtype=float), np.asarray(self._cin(z), dtype=float)

    def jacobians(self, z):
        je = self._jeq(z) if self._jeq else fd_jacobian(self._ceq, z) if self.m_eq else np.zeros((0, self.n))
        ji = self._jin(z) if self._jin else fd_jacobian(self._cin, z) if self.m_in else np.zeros((0, self.n))
        return np.atleast_2d(je).reshape(self.m_eq, self.n), np.atleast_2d(ji).reshape(self.m_in, self.n)

    def hessian_objective(self, z):
        return None if self._hess is None else np.asarray(self._hess(z), dtype=float)


def fd_jacobian(fun, z, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian (test oracle and fallback)."""
    z = np.asarray(z, dtype=float)
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        step = h * max(1.0, abs(z[i]))
        e[i] = step
        cols.append((np.asarray(fun(z + e)) - np.asarray(fun(z - e))) / (2 * step))
    return np.array(cols).T.reshape(-1, z.size)


# --------------------------------------------------------------------------
# graph-assembled NLPs


@dataclass
class Block:
    """Instances of one graph.  Argument ``j`` of instance ``i`` reads
    ``[z, theta, consts][args[i, j]]``; output ``o`` adds ``coef[i, o] * y`` to row ``rows[i, o]``
    (rows < 0 are dropped)."""

    graph: ExprGraph
    args: np.ndarray
    consts: np.ndarray
    rows: np.ndarray
    coef: np.ndarray
    tag: str = ""

    def __post_init__(self):
        self.args = np.asarray(self.args, dtype=np.int64).reshape(-1, self.graph.n_in)
        self.consts = np.asarray(self.consts, dtype=float).reshape(-1)
        self.rows = np.asarray(self.rows, dtype=np.int64).reshape(-1, self.graph.n_out)
        self.coef = np.asarray(self.coef, dtype=float).reshape(self.rows.shape)


@dataclass
class LinearRows:
    """``A z + B theta + b`` (dense)."""

    A: np.ndarray
    B: np.ndarray
    b: np.ndarray

    @classmethod
    def empty(cls, n: int, n_theta: int) -> "LinearRows":
        return cls(np.zeros((0, n)), np.zeros((0, n_theta)), np.zeros(0))


class GraphNlp(NlpProblem):
    """NLP whose constraint rows are linear parts plus scattered graph-block outputs."""

    def __init__(self, n, lb, ub, theta, lin_eq: LinearRows, lin_in: LinearRows,
                 blocks_eq: Sequence[Block], blocks_in: Sequence[Block], cost_blocks: Sequence[Block],
                 var_names=(), eq_tags=(), in_tags=(), layout: dict | None = None,
                 obj_lin=None):
        self.n = int(n)
        self.obj_lin = np.zeros(int(n)) if obj_lin is None else np.asarray(obj_lin, dtype=float)
        self.lb = np.asarray(lb, dtype=float).copy()
        self.ub = np.asarray(ub, dtype=float).copy()
        self.theta = np.asarray(theta, dtype=float).copy()
        self.lin_eq, self.lin_in = lin_eq, lin_in
        self.blocks_eq, self.blocks_in = list(blocks_eq), list(blocks_in)
        self.cost_blocks = list(cost_blocks)
        self.m_eq = lin_eq.A.shape[0]
        self.m_in = lin_in.A.shape[0]
        self.var_names = tuple(var_names)
        self.eq_tags = tuple(eq_tags)
        self.in_tags = tuple(in_tags)
        self.layout = layout or {}
        self._hess_graphs: dict[int, ExprGraph] = {}
        self._cache_key = None
        self._cache: dict = {}

    def set_params(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.theta.shape:
            raise ValueError(f"parameter vector must have shape {self.theta.shape}")
        self.theta = theta.copy()
        self._cache_key = None

    # internal evaluation --------------------------------------------------
    def _inputs(self, blk: Block, z):
        src = np.concatenate([z, self.theta, blk.consts])
        return src[blk.args]

    def _lookup(self, z, what):
        key = z.tobytes()
        if key != self._cache_key:
            self._cache_key = key
            self._cache = {}
        return self._cache.get(what)

    def _rows_value(self, z, lin: LinearRows, blocks, m) -> np.ndarray:
        c = lin.A @ z + lin.B @ self.theta + lin.b
        for blk in blocks:
            Y = blk.graph.eval_rows(self._inputs(blk, z))
            mask = blk.rows >= 0
            c += np.bincount(blk.rows[mask], weights=(blk.coef * Y)[mask], minlength=m)
        return c

    def _rows_jac(self, z, lin: LinearRows, blocks, m):
        n = self.n
        c = lin.A @ z + lin.B @ self.theta + lin.b
        J = lin.A.copy().reshape(-1)
        for blk in blocks:
            Y, JJ = blk.graph.jac_rows(self._inputs(blk, z))
            mask = blk.rows >= 0
            c += np.bincount(blk.rows[mask], weights=(blk.coef * Y)[mask], minlength=m)
            # scatter d row / d z entries
            R = np.broadcast_to(blk.rows[:, :, None], JJ.shape)
            C = np.broadcast_to(blk.args[:, None, :], JJ.shape)
            W = blk.coef[:, :, None] * JJ
            sel = (R >= 0) & (C < n) & (W != 0.0)
            J += np.bincount(R[sel] * n + C[sel], weights=W[sel], minlength=m * n)
        return c, J.reshape(m, n)

    # interface ------------------------------------------------------------
    def constraints(self, z):
        z = np.asarray(z, dtype=float)
        hit = self._lookup(z, "c")
        if hit is None:
            hit = (self._rows_value(z, self.lin_eq, self.blocks_eq, self.m_eq),
                   self._rows_value(z, self.lin_in, self.blocks_in, self.m_in))
            self._cache["c"] = hit
        return hit

    def jacobians(self, z):
        z = np.asarray(z, dtype=float)
        hit = self._lookup(z, "J")
        if hit is None:
            ce, Je = self._rows_jac(z, self.lin_eq, self.blocks_eq, self.m_eq)
            ci, Ji = self._rows_jac(z, self.lin_in, self.blocks_in, self.m_in)
            self._cache["c"] = (ce, ci)
            hit = (Je, Ji)
            self._cache["J"] = hit
        return hit

    def objective(self, z):
        z = np.asarray(z, dtype=float)
        hit = self._lookup(z, "f")
        if hit is None:
            total = float(self.obj_lin @ z)
            for blk in self.cost_blocks:
                Y = blk.graph.eval_rows(self._inputs(blk, z))
                total += float(np.sum(blk.coef * Y))
            hit = total
            self._cache["f"] = hit
        return hit

    def gradient(self, z):
        z = np.asarray(z, dtype=float)
        hit = self._lookup(z, "g")
        if hit is None:
            g = self.obj_lin.copy()
            total = float(self.obj_lin @ z)
            for blk in self.cost_blocks:
                Y, JJ = blk.graph.jac_rows(self._inputs(blk, z))
                total += float(np.sum(blk.coef * Y))
                W = blk.coef[:, 0, None] * JJ[:, 0, :]
                sel = blk.args < self.n
                g += np.bincount(blk.args[sel], weights=W[sel], minlength=self.n)
            self._cache["f"] = total
            hit = g
            self._cache["g"] = hit
        return hit

    def _hess_graph(self, g: ExprGraph) -> ExprGraph:
        key = id(g)
        if key not in self._hess_graphs:
            names = [nm for nm, _ in g.groups]
            grad = differentiate(g, names)
            self._hess_graphs[key] = differentiate(grad, names)
        return self._hess_graphs[key]

    def hessian_objective(self, z):
        z = np.asarray(z, dtype=float)
        n = self.n
        H = np.zeros(n * n)
        for blk in self.cost_blocks:
            hg = self._hess_graph(blk.graph)
            X = self._inputs(blk, z)
            Y = hg.eval_rows(X)  # (inst, n_in * n_in)
            k = blk.graph.n_in
            Y = Y.reshape(-1, k, k) * blk.coef[:, 0, None, None]
            R = np.broadcast_to(blk.args[:, :, None], Y.shape)
            C = np.broadcast_to(blk.args[:, None, :], Y.shape)
            sel = (R < n) & (C < n) & (Y != 0.0)
            H += np.bincount(R[sel] * n + C[sel], weights=Y[sel], minlength=n * n)
        H = H.reshape(n, n)
        return 0.5 * (H + H.T)

    def audit(self) -> str:
        """Plain-text layout dump: variables, slices and constraint tags."""
        out = io.StringIO()
        out.write(f"variables {self.n}\n")
        for name, sl in self.layout.items():
            out.write(f"  slice {name} [{sl[0]}, {sl[1]})\n")
        for i, nm in enumerate(self.var_names):
            out.write(f"  var {i} {nm}\n")
        out.write(f"equalities {self.m_eq}\n")
        for i, t in enumerate(self.eq_tags):
            out.write(f"  eq {i} {t}\n")
        out.write(f"inequalities {self.m_in}\n")
        for i, t in enumerate(self.in_tags):
            out.write(f"  in {i} {t}\n")
        return out.getvalue()


# --------------------------------------------------------------------------
# solver


@dataclass
class SolverOptions:
    kkt_tol: float = 1e-6
    max_iter: int = 200
    penalty_growth: float = 1.1
    backtrack: float = 0.5
    armijo: float = 1e-4
    hessian: str = "bfgs"  # "bfgs" (damped quasi-Newton) or "gauss-newton" (objective Hessian only)
    reg: float = 1e-4  # regularization floor added to the objective Hessian
    min_step: float = 1e-10
    second_order_correction: bool = True
    log_path: str | None = None

    def __post_init__(self):
        if not (self.kkt_tol > 0 and self.reg >= 0 and 0 < self.backtrack < 1):
            raise ValueError("invalid solver tolerances")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.hessian not in ("bfgs", "gauss-newton"):
            raise ValueError(f"unknown Hessian mode {self.hessian!r}")


@dataclass
class Solution:
    z: np.ndarray
    lam_eq: np.ndarray
    lam_in: np.ndarray
    mu: np.ndarray
    status: str
    kkt: float
    iterations: int
    objective: float
    message: str = ""
    qp_iterations: int = 0
    working: tuple = ()
    bound_state: np.ndarray | None = None
    log: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def violation(p: NlpProblem, z, c=None) -> float:
    """l1 constraint violation (bounds excluded)."""
    ce, ci = p.constraints(z) if c is None else c
    return float(np.sum(np.abs(ce)) + np.sum(np.maximum(-ci, 0.0)))


def kkt_residual(p: NlpProblem, z, lam_eq, lam_in, mu) -> float:
    """Max-norm of stationarity, primal and dual feasibility and complementarity."""
    z = np.asarray(z, dtype=float)
    ce, ci = p.constraints(z)
    Je, Ji = p.jacobians(z)
    g = p.gradient(z)
    lam_eq = np.asarray(lam_eq, dtype=float)
    lam_in = np.asarray(lam_in, dtype=float)
    mu = np.asarray(mu, dtype=float)
    stat = g - Je.T @ lam_eq - Ji.T @ lam_in - mu
    parts = [np.max(np.abs(stat)) if stat.size else 0.0]
    if ce.size:
        parts.append(np.max(np.abs(ce)))
    if ci.size:
        parts.append(max(0.0, float(np.max(-ci))))
        parts.append(max(0.0, float(np.max(-lam_in))))
        parts.append(float(np.max(np.abs(lam_in * ci))))
    lo_gap = z - p.lb
    hi_gap = p.ub - z
    parts.append(max(0.0, float(np.max(-lo_gap, initial=0.0)), float(np.max(-hi_gap, initial=0.0))))
    mp, mm = np.maximum(mu, 0.0), np.maximum(-mu, 0.0)
    fin_lo, fin_hi = np.isfinite(lo_gap), np.isfinite(hi_gap)
    parts.append(float(np.max(np.where(fin_lo, mp * np.abs(np.where(fin_lo, lo_gap, 0.0)), mp), initial=0.0)))
    parts.append(float(np.max(np.where(fin_hi, mm * np.abs(np.where(fin_hi, hi_gap, 0.0)), mm), initial=0.0)))
    return float(max(parts))


def _lagrangian_grad(g, Je, Ji, lam_eq, lam_in):
    return g - Je.T @ lam_eq - Ji.T @ lam_in


def _safe(fn, *args):
    try:
        return fn(*args)
    except (DomainError, FloatingPointError):
        return None


def solve(p: NlpProblem, start, opts: SolverOptions | None = None, warm: Solution | None = None) -> Solution:
    """SQP from ``start`` (vector, or any object with a ``z`` attribute)."""
    opts = opts or SolverOptions()
    z = np.asarray(getattr(start, "z", start), dtype=float).copy()
    if z.shape != (p.n,):
        raise ValueError(f"start vector must have length {p.n}, got {z.shape}")
    z = np.clip(z, p.lb, p.ub)
    n, m_eq, m_in = p.n, p.m_eq, p.m_in
    log: list = []
    qp_its = 0

    def fail(status, msg, it, lam_eq=None, lam_in=None, mu=None, f=np.nan):
        le = np.zeros(m_eq) if lam_eq is None else lam_eq
        li = np.zeros(m_in) if lam_in is None else lam_in
        mm = np.zeros(n) if mu is None else mu
        k = _safe(kkt_residual, p, z, le, li, mm)
        return Solution(z, le, li, mm, status, np.inf if k is None else k, it, f, msg, qp_its, log=log)

    try:
        f = p.objective(z)
        g = p.gradient(z)
        c = p.constraints(z)
        Je, Ji = p.jacobians(z)
    except DomainError as e:
        return fail("infeasible-detected", f"evaluation failed at the start point: {e}", 0)

    H0 = p.hessian_objective(z)
    if H0 is None:
        H0 = np.zeros((n, n))
    H = H0 + opts.reg * np.eye(n)
    nu = 1.0
    working = warm.working if warm is not None else None
    bstate = warm.bound_state if warm is not None else None
    lam_eq = np.zeros(m_eq)
    lam_in = np.zeros(m_in)
    mu = np.zeros(n)
    A = np.vstack([Je, Ji])
    if working is None:
        # guess: rows nearly active at the start point
        ce, ci = c
        working = tuple(m_eq + i for i in np.flatnonzero(ci <= 1e-8 * (1 + np.abs(ci).max(initial=0))))
        bstate = np.where(z <= p.lb, -1, np.where(z >= p.ub, 1, 0)).astype(np.int8)

    for it in range(1, opts.max_iter + 1):
        ce, ci = c
        A = np.vstack([Je, Ji])
        bq = np.concatenate([-ce, -ci])
        qp = solve_qp(H, g, A, bq, n_eq=m_eq, lb=p.lb - z, ub=p.ub - z, working=working, bound_state=bstate)
        qp_its += qp.iterations
        if qp.status in ("failed", "max-iter"):
            return fail("max-iter" if qp.status == "max-iter" else "line-search-failure",
                        f"QP subproblem {qp.status} at iteration {it}", it, lam_eq, lam_in, mu, f)
        d = qp.x
        lam_eq_n, lam_in_n, mu_n = qp.lam[:m_eq], qp.lam[m_eq:], qp.mu
        working, bstate = qp.working, qp.bound_state
        viol = violation(p, z, c)
        lin_viol = 0.0
        if qp.status == "infeasible":
            lin_viol = float(np.sum(np.abs(qp.shift)))
            if lin_viol >= viol * (1 - 1e-8) - 1e-12:
                lam_eq, lam_in, mu = lam_eq_n, lam_in_n, mu_n
                return fail("infeasible-detected",
                            f"linearized constraints cannot reduce the violation {viol:.3e}", it,
                            lam_eq, lam_in, mu, f)
        else:
            res = kkt_residual(p, z, lam_eq_n, lam_in_n, mu_n)
            if res <= opts.kkt_tol:
                lam_eq, lam_in, mu = lam_eq_n, lam_in_n, mu_n
                log.append((it, f, res, 0.0, len(working) + int(np.count_nonzero(bstate))))
                _write_log(opts, log)
                return Solution(z, lam_eq, lam_in, mu, "optimal", res, it, f, "", qp_its,
                                working, bstate, log)
        # penalty and merit
        lam_max = float(np.max(np.abs(qp.lam), initial=0.0))
        nu = max(nu, opts.penalty_growth * lam_max + 1e-8)
        quad = float(g @ d + 0.5 * max(d @ H @ d, 0.0))
        red = viol - lin_viol
        if red > 1e-12:
            nu = max(nu, quad / (0.5 * red))
        phi0 = f + nu * viol
        dphi = float(g @ d) - nu * red
        alpha = 1.0
        accepted = False
        zt = ft = ct = None
        tried_soc = False
        while alpha >= opts.min_step:
            zt = np.clip(z + alpha * d, p.lb, p.ub)
            vals = _safe(lambda v: (p.objective(v), p.constraints(v)), zt)
            if vals is not None:
                ft, ct = vals
                phit = ft + nu * violation(p, zt, ct)
                if phit <= phi0 + opts.armijo * alpha * min(dphi, 0.0) + 1e-12 * abs(phi0):
                    accepted = True
                    break
                if alpha == 1.0 and opts.second_order_correction and not tried_soc:
                    tried_soc = True
                    ce_t, ci_t = ct
                    bsoc = np.concatenate([-(ce_t - Je @ d), -(ci_t - Ji @ d)])
                    soc = solve_qp(H, g, A, bsoc, n_eq=m_eq, lb=p.lb - z, ub=p.ub - z,
                                   working=working, bound_state=bstate)
                    qp_its += soc.iterations
                    if soc.status == "optimal":
                        zs = np.clip(z + soc.x, p.lb, p.ub)
                        vs = _safe(lambda v: (p.objective(v), p.constraints(v)), zs)
                        if vs is not None:
                            fs, cs = vs
                            if fs + nu * violation(p, zs, cs) <= phi0 + opts.armijo * min(dphi, 0.0):
                                zt, ft, ct = zs, fs, cs
                                accepted = True
                                break
            alpha *= opts.backtrack
        if not accepted:
            lam_eq, lam_in, mu = lam_eq_n, lam_in_n, mu_n
            return fail("line-search-failure", f"no acceptable step at iteration {it}", it,
                        lam_eq, lam_in, mu, f)
        try:
            gt = p.gradient(zt)
            Je_t, Ji_t = p.jacobians(zt)
        except DomainError as e:
            return fail("line-search-failure", str(e), it, lam_eq, lam_in, mu, f)
        s = zt - z
        lam_eq, lam_in, mu = lam_eq_n, lam_in_n, mu_n
        if opts.hessian == "bfgs":
            y = _lagrangian_grad(gt, Je_t, Ji_t, lam_eq, lam_in) - _lagrangian_grad(g, Je, Ji, lam_eq, lam_in)
            H = _damped_bfgs(H, s, y)
        else:
            H = p.hessian_objective(zt) + opts.reg * np.eye(n)
        z, f, g, c, Je, Ji = zt, ft, gt, ct, Je_t, Ji_t
        log.append((it, f, float("nan"), float(np.max(np.abs(s), initial=0.0)),
                    len(working) + int(np.count_nonzero(bstate))))
        res = kkt_residual(p, z, lam_eq, lam_in, mu)
        if res <= opts.kkt_tol:
            log[-1] = log[-1][:2] + (res,) + log[-1][3:]
            _write_log(opts, log)
            return Solution(z, lam_eq, lam_in, mu, "optimal", res, it, f, "", qp_its, working, bstate, log)
    _write_log(opts, log)
    return fail("max-iter", f"no convergence in {opts.max_iter} iterations", opts.max_iter,
                lam_eq, lam_in, mu, f)


def _damped_bfgs(H, s, y):
    ss = float(s @ s)
    if ss <= 1e-30:
        return H
    Hs = H @ s
    sHs = float(s @ Hs)
    if sHs <= 1e-30:
        return H
    sy = float(s @ y)
    if sy < 0.2 * sHs:
        theta = 0.8 * sHs / (sHs - sy)
        y = theta * y + (1 - theta) * Hs
        sy = float(s @ y)
    H = H - np.outer(Hs, Hs) / sHs + np.outer(y, y) / sy
    return 0.5 * (H + H.T)


def _write_log(opts: SolverOptions, log) -> None:
    if opts.log_path is None:
        return
    with open(opts.log_path, "w", newline="") as fh:
        fh.write(iteration_log_csv(log))


def iteration_log_csv(log) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "objective", "kkt", "step", "active"])
    for row in log:
        w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), repr(float(row[3])), row[4]])
    return buf.getvalue()
