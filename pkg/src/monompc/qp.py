"""Dense primal active-set solver for convex quadratic programs.

    min 0.5 x'Hx + g'x   s.t.  A[:n_eq] x = b[:n_eq],  A[n_eq:] x >= b[n_eq:],  lb <= x <= ub

Bounds are handled by fixing variables, general rows by a working set.  A
phase-1 LP (HiGHS through scipy) supplies a feasible start when the supplied
guess is infeasible; when the constraints are inconsistent the LP's minimal
violation defines shifted right-hand sides and the QP is solved on those
(``status == "infeasible"``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog
from scipy.sparse import csr_matrix

FEAS_TOL = 1e-10
STATS = {}
PERTURB = 1e-9  # relaxation that removes degeneracy during the iterations
SNAP_TOL = 1e-7  # accepted row violation when the final snap is infeasible
INF = np.inf


@dataclass
class QpResult:
    x: np.ndarray
    lam: np.ndarray  # row multipliers (>= 0 for inequalities)
    mu: np.ndarray  # bound multipliers: >= 0 at lower bounds, <= 0 at upper bounds
    status: str  # "optimal", "infeasible" (solved with shifted rows), "max-iter", "failed"
    iterations: int
    working: tuple[int, ...]
    bound_state: np.ndarray  # -1 lower, +1 upper, 0 free
    shift: np.ndarray | None = None  # rhs relaxation used when status == "infeasible"
    phase1: bool = False


class _Factor:
    """Null-space factorization of the working set, updated as constraints enter and leave.

    ``A_WF' = Q R`` with ``Q`` square orthogonal over the free variables ``F``;
    the trailing columns of ``Q`` span the null space of the working rows.
    The working rows are kept linearly independent: updates that would make
    them dependent are refused.
    """

    DEP_TOL = 1e-9

    def __init__(self, H, g, A):
        self.H, self.g, self.A = H, g, A
        self.n = H.shape[0]

    def reset(self, W: list[int], state: np.ndarray) -> bool:
        self.W = list(W)
        self.F = np.flatnonzero(state == 0)
        M = self.A[np.ix_(self.W, self.F)].T
        if self.W and self.F.size:
            self.Q, self.R = sla.qr(M, check_finite=False)
        else:
            self.Q, self.R = np.eye(self.F.size), np.zeros((self.F.size, len(self.W)))
        return self._full_rank(self.R)

    def _full_rank(self, R) -> bool:
        w = R.shape[1]
        if w > R.shape[0]:
            return False
        return bool(w == 0 or np.min(np.abs(np.diag(R[:w, :w]))) > self.DEP_TOL)

    def add_row(self, i: int) -> bool:
        a = self.A[i, self.F]
        w = len(self.W)
        if w >= self.F.size:
            return False
        Q, R = sla.qr_insert(self.Q, self.R, a, w, which="col", check_finite=False)
        if abs(R[w, w]) <= self.DEP_TOL * max(1.0, float(np.linalg.norm(a))):
            return False
        self.Q, self.R = Q, R
        self.W.append(i)
        return True

    def remove_row(self, pos: int) -> None:
        self.Q, self.R = sla.qr_delete(self.Q, self.R, pos, 1, which="col", check_finite=False)
        self.W.pop(pos)

    def fix_var(self, j: int) -> bool:
        pos = int(np.searchsorted(self.F, j))
        if self.F.size == 1:
            if self.W:
                return False
            Q, R = np.zeros((0, 0)), np.zeros((0, 0))
        else:
            Q, R = sla.qr_delete(self.Q, self.R, pos, 1, which="row", check_finite=False)
            if not self._full_rank(R):
                return False
        self.Q, self.R = Q, R
        self.F = np.delete(self.F, pos)
        return True

    def free_var(self, j: int) -> None:
        pos = int(np.searchsorted(self.F, j))
        if self.W and self.F.size:
            row = self.A[self.W, j]
            self.Q, self.R = sla.qr_insert(self.Q, self.R, row, pos, which="row", check_finite=False)
            self.F = np.insert(self.F, pos, j)
        else:
            self.F = np.insert(self.F, pos, j)
            self.Q, self.R = np.eye(self.F.size), np.zeros((self.F.size, len(self.W)))

    def _reduced_solve(self, Z, rhs):
        HF = self.H[np.ix_(self.F, self.F)]
        M = Z.T @ HF @ Z
        M = 0.5 * (M + M.T)
        reg = 0.0
        for _ in range(6):
            try:
                c = sla.cho_factor(M + reg * np.eye(M.shape[0]), lower=True, check_finite=False)
                return sla.cho_solve(c, rhs, check_finite=False), HF
            except (np.linalg.LinAlgError, sla.LinAlgError):
                reg = max(10.0 * reg, 1e-12 * max(1.0, float(np.max(np.abs(np.diag(M)), initial=1.0))))
        return None, HF

    def _multipliers(self, grad_F):
        w = len(self.W)
        if not w:
            return np.zeros(0)
        return sla.solve_triangular(self.R[:w, :w], self.Q[:, :w].T @ grad_F, check_finite=False)

    def step(self, x: np.ndarray):
        """Minimizing step from ``x`` that keeps the working rows and fixed variables unchanged."""
        n, w = self.n, len(self.W)
        p = np.zeros(n)
        grad = self.H @ x + self.g
        F = self.F
        if F.size > w:
            Z = self.Q[:, w:]
            zz, HF = self._reduced_solve(Z, -(Z.T @ grad[F]))
            if zz is None:
                return None
            p[F] = Z @ zz
            gF = grad[F] + HF @ p[F]
        else:
            gF = grad[F]
        return p, self._multipliers(gF)

    def target(self, c: np.ndarray, fixed_x: np.ndarray):
        """Minimizer with working rows equal to ``c`` and fixed variables at ``fixed_x``."""
        _n, w = self.n, len(self.W)
        F = self.F
        x = fixed_x.copy()
        x[F] = 0.0
        cw = c - self.A[self.W] @ x if w else np.zeros(0)
        if w:
            y = sla.solve_triangular(self.R[:w, :w], cw, trans="T", check_finite=False)
            x[F] = self.Q[:, :w] @ y
        res = self.step(x)
        if res is None:
            return None
        p, lam = res
        return x + p, lam


def _independent(rows: list[np.ndarray], tol: float = 1e-9) -> list[int]:
    """Greedy selection, in order, of linearly independent vectors."""
    if not rows:
        return []
    n = rows[0].size
    Q = np.zeros((n, min(n, len(rows))))
    k = 0
    chosen = []
    for i, v in enumerate(rows):
        if k == n:
            break
        nv = np.linalg.norm(v)
        if nv == 0.0:
            continue
        r = v / nv
        if k:
            Qk = Q[:, :k]
            r = r - Qk @ (Qk.T @ r)
            r = r - Qk @ (Qk.T @ r)
        nr = np.linalg.norm(r)
        if nr > tol:
            Q[:, k] = r / nr
            k += 1
            chosen.append(i)
    return chosen


_LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


def _project(A, b, n_eq, lb, ub, target):
    """Feasible point closest to ``target`` in the 1-norm (None when the rows are inconsistent)."""
    m, n = A.shape
    n_in = m - n_eq
    # variables: x (n), t_plus (n), t_minus (n) with x - target = t_plus - t_minus
    c = np.concatenate([np.zeros(n), np.ones(2 * n)])
    bounds = [(None if not np.isfinite(l) else l, None if not np.isfinite(u) else u) for l, u in zip(lb, ub)]
    bounds += [(0.0, None)] * (2 * n)
    I = np.eye(n)
    A_eq = np.hstack([I, -I, I])
    b_eq = target.copy()
    if n_eq:
        A_eq = np.vstack([A_eq, np.hstack([A[:n_eq], np.zeros((n_eq, 2 * n))])])
        b_eq = np.concatenate([b_eq, b[:n_eq]])
    A_ub = b_ub = None
    if n_in:
        A_ub = csr_matrix(np.hstack([-A[n_eq:], np.zeros((n_in, 2 * n))]))
        b_ub = -b[n_eq:]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=csr_matrix(A_eq), b_eq=b_eq, bounds=bounds, method="highs",
                  options=_LP_OPTIONS)
    if res.status != 0:
        return None
    x = np.clip(res.x[:n], lb, ub)
    r = A @ x - b
    if (n_eq and np.max(np.abs(r[:n_eq])) > 1e-9) or (n_in and np.min(r[n_eq:]) < -1e-9):
        return None
    return x


def _phase1(A, b, n_eq, lb, ub):
    """Minimize the total row violation over the bounds; returns (x, violation, shift)."""
    m, n = A.shape
    n_in = m - n_eq
    # variables: x (n), s_in (n_in), s_eq_plus (n_eq), s_eq_minus (n_eq)
    c = np.concatenate([np.zeros(n), np.ones(n_in + 2 * n_eq)])
    bounds = [(None if not np.isfinite(l) else l, None if not np.isfinite(u) else u) for l, u in zip(lb, ub)]
    bounds += [(0.0, None)] * (n_in + 2 * n_eq)
    A_ub = b_ub = A_eq = b_eq = None
    if n_in:
        # A x + s >= b  ->  -A x - s <= -b
        M = np.zeros((n_in, n + n_in + 2 * n_eq))
        M[:, :n] = -A[n_eq:]
        M[:, n:n + n_in] = -np.eye(n_in)
        A_ub, b_ub = csr_matrix(M), -b[n_eq:]
    if n_eq:
        M = np.zeros((n_eq, n + n_in + 2 * n_eq))
        M[:, :n] = A[:n_eq]
        M[:, n + n_in:n + n_in + n_eq] = np.eye(n_eq)
        M[:, n + n_in + n_eq:] = -np.eye(n_eq)
        A_eq, b_eq = csr_matrix(M), b[:n_eq]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs",
                  options=_LP_OPTIONS)
    if res.status != 0:
        return None, INF, None
    x = np.clip(res.x[:n], lb, ub)
    r = A @ x - b
    shift = np.zeros(m)
    shift[n_eq:] = np.maximum(-r[n_eq:], 0.0)
    shift[:n_eq] = -r[:n_eq]
    return x, float(np.sum(np.abs(shift))), shift


def solve_qp(H, g, A=None, b=None, n_eq: int = 0, lb=None, ub=None, working=None, bound_state=None,
             max_iter: int | None = None, feas_tol: float = FEAS_TOL) -> QpResult:
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.size
    A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float)).reshape(-1, n)
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float).reshape(-1)
    m = A.shape[0]
    lb = np.full(n, -INF) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, INF) if ub is None else np.asarray(ub, dtype=float)
    if np.any(lb > ub):
        raise ValueError("QP bounds are inconsistent")
    max_iter = max_iter or 20 * (n + m) + 50

    # row scaling to unit infinity norm; constant rows are checked and dropped
    norms = np.max(np.abs(A), axis=1) if m else np.zeros(0)
    live = norms > 0
    scale = np.where(live, 1.0 / np.where(live, norms, 1.0), 1.0)
    As = A * scale[:, None]
    bs = b * scale
    is_eq = np.arange(m) < n_eq
    ineq = ~is_eq & live
    dead_viol = np.where(is_eq, np.abs(bs), np.maximum(bs, 0.0)) * (~live)
    dead_bad = bool(np.any(dead_viol > feas_tol))

    fac = _Factor(H, g, As)
    pinned = lb == ub

    def residual(x):
        return As @ x - bs

    def feasible(x, rshift=None):
        r = residual(x) if rshift is None else residual(x) + rshift
        ok_eq = np.all(np.abs(r[is_eq & live]) <= feas_tol * 10) if n_eq else True
        ok_in = np.all(r[ineq] >= -feas_tol)
        return bool(ok_eq and ok_in and np.all(x >= lb - feas_tol) and np.all(x <= ub + feas_tol))

    def bound_mult(x, W, lam):
        grad = H @ x + g
        if W:
            grad = grad - As[W].T @ lam
        return grad

    def at_bounds(state, lo, hi):
        return np.where(state < 0, lo, np.where(state > 0, hi, 0.0))

    def result(x, W, lam, state, status, it, shift=None, phase1=False):
        lam_full = np.zeros(m)
        if W and len(lam) == len(W):
            lam_full[W] = lam
        else:
            W, lam = [], np.zeros(0)
        lam_full = lam_full * scale
        mu = np.where(state != 0, bound_mult(x, W, lam), 0.0)
        return QpResult(x, lam_full, mu, status, it, tuple(int(i) for i in W), state.copy(), shift, phase1)

    # guessed working set, reduced to independent constraints
    eq_rows = [i for i in range(n_eq) if live[i]]
    state = np.zeros(n, dtype=np.int8)
    if bound_state is not None:
        state = np.asarray(bound_state, dtype=np.int8).copy()
        state[(state < 0) & ~np.isfinite(lb)] = 0
        state[(state > 0) & ~np.isfinite(ub)] = 0
    state[pinned] = -1
    W = list(eq_rows)
    has_guess = working is not None or bound_state is not None
    if has_guess:
        guess = [int(i) for i in (working or ()) if n_eq <= i < m and live[i]]
        fixed = np.flatnonzero(state != 0)
        vecs = [As[i] for i in eq_rows]
        for j in fixed:
            e = np.zeros(n)
            e[j] = 1.0
            vecs.append(e)
        vecs += [As[i] for i in guess]
        keep = set(_independent(vecs))
        ne, nf = len(eq_rows), fixed.size
        if all(k in keep for k in range(ne)):
            for pos, j in enumerate(fixed):
                if ne + pos not in keep and not pinned[j]:
                    state[j] = 0
            W += [guess[k - ne - nf] for k in sorted(keep) if k >= ne + nf]
    x = None
    lam = np.zeros(0)
    shift = None
    used_phase1 = False
    rshift = np.zeros(m)
    guess_rows = list(W[len(eq_rows):])
    guess_state = state.copy() if has_guess else None
    target = np.clip(np.zeros(n), lb, ub)
    guess_x = None
    if not dead_bad and has_guess and fac.reset(W, state):
        sol = fac.target(bs[W], at_bounds(state, lb, ub))
        if sol is not None and feasible(sol[0]):
            x, lam = sol
        elif sol is not None:
            guess_x = np.clip(sol[0], lb, ub)
    if x is None:
        # start at the origin when feasible, else at the feasible point nearest to the
        # guessed solution
        if not dead_bad and feasible(target):
            xl = target
        else:
            used_phase1 = True
            goal = target if guess_x is None else guess_x
            xl = None if dead_bad else _project(As[live], bs[live], int(np.sum(live[:n_eq])), lb, ub, goal)
        if xl is None:
            xl, viol, sh = _phase1(As[live], bs[live], int(np.sum(live[:n_eq])), lb, ub)
            if xl is None:
                return QpResult(np.zeros(n), np.zeros(m), np.zeros(n), "failed", 0, (), state, None, True)
            full_shift = np.zeros(m)
            full_shift[live] = sh
            if viol > feas_tol * max(1, m) or dead_bad:
                shift = full_shift / scale  # in original units
                rshift = full_shift
        x = xl
        r = residual(x) + rshift
        act = set(i for i in range(n_eq, m) if live[i] and abs(r[i]) <= 1e-9)
        at_lo = np.isclose(x, lb, rtol=0, atol=1e-12) & np.isfinite(lb)
        at_hi = np.isclose(x, ub, rtol=0, atol=1e-12) & np.isfinite(ub) & ~at_lo
        if guess_state is not None:
            # keep only the guessed constraints; other active ones enter through the ratio test
            act_rows = [i for i in guess_rows if i in act]
            at_lo &= guess_state < 0
            at_hi &= guess_state > 0
        else:
            act_rows = sorted(act)
        state = np.zeros(n, dtype=np.int8)
        cand_vecs = [As[i] for i in eq_rows]
        cand = [("r", i) for i in eq_rows]
        for j in np.flatnonzero(pinned | at_lo | at_hi):
            e = np.zeros(n)
            e[j] = 1.0
            cand_vecs.append(e)
            cand.append(("b", int(j)))
        for i in act_rows:
            cand_vecs.append(As[i])
            cand.append(("r", i))
        keep = _independent(cand_vecs)
        W = []
        for k in keep:
            kind, i = cand[k]
            if kind == "r":
                W.append(i)
            else:
                state[i] = -1 if (pinned[i] or at_lo[i]) else 1
        # equality rows dropped as dependent stay satisfied along the null-space steps
        if not fac.reset(W, state):
            W = [i for i in W if i < n_eq]
            fac.reset(W, state)

    # degenerate vertices are broken up by relaxing every inequality and bound by a tiny
    # random amount; the relaxation is removed by a final solve on the optimal working set
    prng = np.random.default_rng(12345)
    pert = np.where(ineq, PERTURB * prng.uniform(0.5, 1.0, m), 0.0)
    # the start may violate rows within the LP tolerance; relax those rows to it
    pert0 = np.where(ineq, np.maximum(-(residual(x) + rshift), 0.0), 0.0)
    pert += pert0
    fin_lb = np.isfinite(lb) & ~pinned
    fin_ub = np.isfinite(ub) & ~pinned
    lbp = np.where(fin_lb, lb - PERTURB * prng.uniform(0.5, 1.0, n) * np.maximum(1.0, np.abs(lb)), lb)
    ubp = np.where(fin_ub, ub + PERTURB * prng.uniform(0.5, 1.0, n) * np.maximum(1.0, np.abs(ub)), ub)
    x = x.copy()
    x[state < 0] = lbp[state < 0]
    x[state > 0] = ubp[state > 0]

    status = "max-iter"
    it = 0
    skip = np.zeros(m, dtype=bool)  # rows found dependent on the working set
    skipb = np.zeros(n, dtype=bool)  # bounds found dependent on the working set
    seen: set = set()
    level = 0
    for it in range(1, max_iter + 1):
        sol = fac.step(x)
        if sol is None:
            status = "failed"
            break
        p, lam = sol
        if np.max(np.abs(p), initial=0.0) <= 1e-13 * max(1.0, float(np.max(np.abs(x), initial=0.0))):
            p = np.zeros(n)
        alpha, block = 1.0, None
        if np.any(p):
            ptol = 1e-10 * float(np.max(np.abs(p)))
            Ap = As @ p
            r = residual(x) + rshift + pert
            inW = np.zeros(m, dtype=bool)
            inW[fac.W] = True
            cand = np.flatnonzero(ineq & ~inW & ~skip & (Ap < -ptol))
            if cand.size:
                steps = np.maximum(r[cand], 0.0) / -Ap[cand]
                k = int(np.argmin(steps))
                if steps[k] < alpha:
                    alpha, block = float(steps[k]), ("r", int(cand[k]))
            free = (state == 0) & ~skipb
            dn = free & (p < -ptol) & np.isfinite(lb)
            if np.any(dn):
                idx = np.flatnonzero(dn)
                steps = np.maximum(x[idx] - lbp[idx], 0.0) / -p[idx]
                k = int(np.argmin(steps))
                if steps[k] < alpha:
                    alpha, block = float(steps[k]), ("lo", int(idx[k]))
            up = free & (p > ptol) & np.isfinite(ub)
            if np.any(up):
                idx = np.flatnonzero(up)
                steps = np.maximum(ubp[idx] - x[idx], 0.0) / p[idx]
                k = int(np.argmin(steps))
                if steps[k] < alpha:
                    alpha, block = float(steps[k]), ("hi", int(idx[k]))
        if block is not None:
            x = x + alpha * p
            kind, i = block
            if kind == "r":
                added = fac.add_row(i)
                skip[i] = not added
            else:
                added = fac.fix_var(i)
                if added:
                    state[i] = -1 if kind == "lo" else 1
                    x[i] = lbp[i] if kind == "lo" else ubp[i]
                skipb[i] = not added
            if alpha > 0.0:
                seen.clear()
            elif added:
                key = (tuple(sorted(fac.W)), state.tobytes())
                if key in seen:
                    # cycling among degenerate constraints: enlarge the relaxation
                    level = min(level + 1, 3)
                    pert = pert0 + np.where(ineq, PERTURB * 10.0 ** level * prng.uniform(0.5, 1.0, m), 0.0)
                    seen.clear()
                seen.add(key)
            continue
        x = x + p
        # multipliers: rows in W (inequalities need >= 0) and fixed bounds
        W = fac.W
        gnorm = max(1.0, float(np.max(np.abs(g))) if n else 1.0)
        dtol = 1e-11 * gnorm
        worst, drop = -dtol, None
        for pos, i in enumerate(W):
            if i >= n_eq and lam[pos] < worst:
                worst, drop = lam[pos], ("r", pos)
        if np.any(state != 0):
            grad = bound_mult(x, W, lam)
            sg = np.where(state < 0, grad, -grad)
            sg[pinned | (state == 0)] = np.inf
            j = int(np.argmin(sg))
            if sg[j] < worst:
                worst, drop = sg[j], ("b", j)
        if drop is None:
            status = "optimal"
            # snap onto the unrelaxed working rows and bounds
            sol = fac.target(bs[W] - rshift[W], at_bounds(state, lb, ub))
            if sol is not None and feasible(sol[0], rshift):
                x, lam = sol
            else:
                x = np.clip(x, lb, ub)
                if not feasible(x, rshift + SNAP_TOL * ineq):
                    status = "failed"
            break
        skip[:] = False
        skipb[:] = False
        if drop[0] == "r":
            fac.remove_row(drop[1])
        else:
            state[drop[1]] = 0
            fac.free_var(drop[1])
    if status == "optimal" and shift is not None:
        status = "infeasible"
    return result(x, list(fac.W), lam, state, status, it, shift, used_phase1)
