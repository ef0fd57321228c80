"""Interval reachability through decomposition functions, with Monte-Carlo checks."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .box import Hyperrect
from .exprgraph import DecompGraph, ExprGraph

CONTAINMENT_TOL = 1e-9


@dataclass(frozen=True)
class ReachTube:
    """Boxes for prediction steps k = 0..N."""

    boxes: tuple[Hyperrect, ...]

    def __post_init__(self):
        if len(self.boxes) < 1:
            raise ValueError("a tube needs at least the initial box")

    @property
    def N(self) -> int:
        return len(self.boxes) - 1

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, k: int) -> Hyperrect:
        return self.boxes[k]

    def to_rows(self) -> list[tuple[int, int, float, float]]:
        return [(k, i, float(b.lo[i]), float(b.hi[i]))
                for k, b in enumerate(self.boxes) for i in range(b.n)]

    def to_csv(self, path=None) -> str:
        """CSV with columns step, dim, lo, hi; written to ``path`` when given."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "dim", "lo", "hi"])
        for k, i, lo, hi in self.to_rows():
            w.writerow([k, i, repr(lo), repr(hi)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "ReachTube":
        rows = list(csv.DictReader(io.StringIO(text)))
        steps: dict[int, dict[int, tuple[float, float]]] = {}
        for r in rows:
            steps.setdefault(int(r["step"]), {})[int(r["dim"])] = (float(r["lo"]), float(r["hi"]))
        boxes = []
        for k in sorted(steps):
            dims = steps[k]
            lo = [dims[i][0] for i in sorted(dims)]
            hi = [dims[i][1] for i in sorted(dims)]
            boxes.append(Hyperrect(lo, hi))
        return cls(tuple(boxes))


def propagate_interval(d: DecompGraph, box_x: Hyperrect, u, box_p: Hyperrect) -> Hyperrect:
    """One-step enclosure ``[d(lo_x, lo_p, u, hi_x, hi_p), d(hi_x, hi_p, u, lo_x, lo_p)]``."""
    u = np.asarray(u, dtype=float).reshape(-1)
    rows = np.empty((2, d.graph.n_in))
    rows[0] = np.concatenate([box_x.lo, box_p.lo, u, box_x.hi, box_p.hi])
    rows[1] = np.concatenate([box_x.hi, box_p.hi, u, box_x.lo, box_p.lo])
    y = d.graph.eval_rows(rows)
    lo, hi = y[0], y[1]
    if np.any(lo > hi):
        # only possible when d violates its ordering conditions
        bad = int(np.flatnonzero(lo > hi)[0])
        raise ValueError(f"decomposition produced an inverted interval in dimension {bad}: "
                         f"{lo[bad]!r} > {hi[bad]!r}")
    return Hyperrect(lo, hi)


def propagate_tube(d: DecompGraph, box0: Hyperrect, inputs: Sequence, box_p: Hyperrect) -> ReachTube:
    """Open-loop tube for an input sequence of length N."""
    boxes = [box0]
    for u in inputs:
        boxes.append(propagate_interval(d, boxes[-1], u, box_p))
    return ReachTube(tuple(boxes))


@dataclass(frozen=True)
class ContainmentReport:
    n_samples: int
    violations: int
    max_excess: np.ndarray
    corner_error: float | None = None  # monotone tightness gap when corners were checked

    @property
    def ok(self) -> bool:
        return self.violations == 0


def _eval_f(f: ExprGraph, xs: np.ndarray, u: np.ndarray, ps: np.ndarray) -> np.ndarray:
    n = xs.shape[0]
    rows = np.concatenate([xs, np.broadcast_to(u, (n, u.size)), ps], axis=1)
    return f.eval_rows(rows)


def mc_containment(f: ExprGraph, box_x: Hyperrect, u, box_p: Hyperrect, predicted: Hyperrect,
                   n_samples: int = 10_000, seed: int = 0, mode: str = "uniform",
                   tol: float = CONTAINMENT_TOL) -> ContainmentReport:
    """Count images of sampled ``(x, p)`` that leave ``predicted`` by more than ``tol``.

    ``mode="uniform"`` samples the boxes uniformly; ``mode="corner"`` enumerates
    every vertex of the joint (x, p) box (limited to n_x + n_p <= 12).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    u = np.asarray(u, dtype=float).reshape(-1)
    if mode == "uniform":
        rng = np.random.default_rng(seed)
        xs = box_x.sample(rng, n_samples)
        ps = box_p.sample(rng, n_samples)
    elif mode == "corner":
        joint = box_x.product(box_p)
        if joint.n > 12:
            raise ValueError("corner mode supports n_x + n_p <= 12")
        V = joint.vertices()
        xs, ps = V[:, :box_x.n], V[:, box_x.n:]
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    Y = _eval_f(f, xs, u, ps)
    exc = np.maximum(np.maximum(predicted.lo - Y, Y - predicted.hi), 0.0)
    viol = int(np.count_nonzero(np.any(exc > tol, axis=1)))
    return ContainmentReport(n_samples=int(xs.shape[0]), violations=viol, max_excess=exc.max(axis=0))


def corner_tightness(f: ExprGraph, box_x: Hyperrect, u, box_p: Hyperrect, predicted: Hyperrect) -> float:
    """Max gap between ``predicted`` and the images of the lower and upper corners.

    Zero for monotone systems, where the enclosure is attained at the corners.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    Y = _eval_f(f, np.stack([box_x.lo, box_x.hi]), u, np.stack([box_p.lo, box_p.hi]))
    return float(max(np.max(np.abs(Y[0] - predicted.lo)), np.max(np.abs(Y[1] - predicted.hi))))


def mc_tube_containment(f: ExprGraph, tube: ReachTube, inputs: Sequence, box_p: Hyperrect,
                        n_samples: int = 1000, seed: int = 0, tol: float = CONTAINMENT_TOL) -> int:
    """Simulate full trajectories from the initial box; count steps leaving the tube."""
    rng = np.random.default_rng(seed)
    xs = tube[0].sample(rng, n_samples)
    viol = 0
    for k, u in enumerate(inputs):
        ps = box_p.sample(rng, n_samples)
        xs = _eval_f(f, xs, np.asarray(u, dtype=float).reshape(-1), ps)
        b = tube[k + 1]
        viol += int(np.count_nonzero(np.any((xs < b.lo - tol) | (xs > b.hi + tol), axis=1)))
    return viol


def vertex_hull(f: ExprGraph, box_x: Hyperrect, u, box_p: Hyperrect) -> Hyperrect:
    """Hull of the images of all joint vertices (exact reach box for linear maps)."""
    joint = box_x.product(box_p)
    V = joint.vertices()
    Y = _eval_f(f, V[:, :box_x.n], np.asarray(u, dtype=float).reshape(-1), V[:, box_x.n:])
    return Hyperrect.hull_of_points(Y)


@dataclass(frozen=True)
class DecompositionReport:
    """Sampled check of the three defining conditions of a decomposition function.

    Condition 1: ``d(x, p, u, x, p) = f(x, u, p)``.  Condition 2: ``d`` is
    nondecreasing in its first (x, p) copy.  Condition 3: ``d`` is nonincreasing
    in its second copy.
    """

    n_samples: int
    violations: tuple[int, int, int]
    max_error: tuple[float, float, float]

    @property
    def ok(self) -> bool:
        return not any(self.violations)

    def failed_conditions(self) -> list[int]:
        return [i + 1 for i, v in enumerate(self.violations) if v]

    def summary(self) -> str:
        parts = [f"condition {i + 1}: {v} violations (max {e:.3g})"
                 for i, (v, e) in enumerate(zip(self.violations, self.max_error))]
        return f"{self.n_samples}-sample decomposition check: {'pass' if self.ok else 'FAIL'}; " + "; ".join(parts)


def check_decomposition(d: DecompGraph, f: ExprGraph, box_x: Hyperrect, box_u: Hyperrect,
                        box_p: Hyperrect, n_samples: int = 10_000, seed: int = 0,
                        tol: float = 1e-10) -> DecompositionReport:
    """Sample ordered pairs inside the boxes and count violations of each condition."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    n_x = box_x.n
    joint = box_x.product(box_p)
    us = box_u.sample(rng, n_samples)
    a = joint.sample(rng, n_samples)
    b = a + rng.random(a.shape) * (joint.hi - a)  # b >= a componentwise
    c = joint.sample(rng, n_samples)

    def dval(first, second):
        rows = np.concatenate([first[:, :n_x], first[:, n_x:], us, second[:, :n_x], second[:, n_x:]], axis=1)
        return d.graph.eval_rows(rows)

    diag = dval(a, a) - _eval_rows_f(f, a[:, :n_x], us, a[:, n_x:])
    e1 = np.abs(diag)
    e2 = np.maximum(dval(a, c) - dval(b, c), 0.0)
    e3 = np.maximum(dval(c, b) - dval(c, a), 0.0)
    viol = tuple(int(np.count_nonzero(np.any(e > tol, axis=1))) for e in (e1, e2, e3))
    err = tuple(float(e.max(initial=0.0)) for e in (e1, e2, e3))
    return DecompositionReport(n_samples, viol, err)


def _eval_rows_f(f: ExprGraph, xs, us, ps) -> np.ndarray:
    return f.eval_rows(np.concatenate([xs, us, ps], axis=1))
