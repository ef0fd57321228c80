"""Binary-tree partitions of a bounding box into subregions with cut variables.

A tree node is either ``None`` (a leaf) or ``(axis, left, right)``.  Leaves are
numbered in in-order traversal, so leaf 0 holds the lower corner of the
bounding box and the last leaf holds the upper corner.  Every leaf corner
coordinate is one entry of the source vector ``[lo (n), hi (n), cuts (m)]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .box import Hyperrect


def _check_tree(t, n_x: int | None):
    if t is None:
        return
    if not (isinstance(t, (tuple, list)) and len(t) == 3):
        raise ValueError(f"tree node must be None or (axis, left, right), got {t!r}")
    axis = t[0]
    if isinstance(axis, bool) or not isinstance(axis, (int, np.integer)) or axis < 0:
        raise ValueError(f"cut axis must be a nonnegative integer, got {axis!r}")
    if n_x is not None and axis >= n_x:
        raise ValueError(f"cut axis {axis} out of range for {n_x} states")
    _check_tree(t[1], n_x)
    _check_tree(t[2], n_x)


def _freeze(t):
    if t is None:
        return None
    return (int(t[0]), _freeze(t[1]), _freeze(t[2]))


@dataclass(frozen=True)
class PartitionSpec:
    """Partition tree over an ``n_x``-dimensional box."""

    tree: object
    n_x: int

    def __post_init__(self):
        if self.n_x < 1:
            raise ValueError("n_x must be >= 1")
        _check_tree(self.tree, self.n_x)
        object.__setattr__(self, "tree", _freeze(self.tree))
        lo_idx, hi_idx, cut_axis, cut_lo, cut_hi = self._layout()
        object.__setattr__(self, "_lo_idx", lo_idx)
        object.__setattr__(self, "_hi_idx", hi_idx)
        object.__setattr__(self, "_cut_axis", cut_axis)
        object.__setattr__(self, "_cut_lo", cut_lo)
        object.__setattr__(self, "_cut_hi", cut_hi)

    # construction helpers
    @classmethod
    def single(cls, n_x: int) -> "PartitionSpec":
        return cls(None, n_x)

    @classmethod
    def from_levels(cls, levels: Sequence[int], n_x: int) -> "PartitionSpec":
        """Balanced tree cutting every node of level ``i`` along ``levels[i]``."""
        def grow(depth):
            if depth == len(levels):
                return None
            return (int(levels[depth]), grow(depth + 1), grow(depth + 1))
        return cls(grow(0), n_x)

    @classmethod
    def from_nested(cls, nested, n_x: int) -> "PartitionSpec":
        """Tree from nested lists ``[axis, left, right]`` with ``None`` leaves."""
        return cls(nested, n_x)

    @classmethod
    def from_config(cls, cfg, n_x: int) -> "PartitionSpec":
        if cfg is None:
            return cls.single(n_x)
        if isinstance(cfg, dict):
            if "levels" in cfg:
                return cls.from_levels(cfg["levels"], n_x)
            if "tree" in cfg:
                return cls.from_nested(cfg["tree"], n_x)
            raise ValueError("partition config needs 'levels' or 'tree'")
        return cls.from_levels(cfg, n_x)

    def to_config(self) -> dict:
        def nest(t):
            return None if t is None else [t[0], nest(t[1]), nest(t[2])]
        return {"tree": nest(self.tree)}

    # layout
    def _layout(self):
        n = self.n_x
        lo_rows, hi_rows = [], []
        cut_axis, cut_lo, cut_hi = [], [], []

        def walk(t, lo, hi):
            if t is None:
                lo_rows.append(list(lo))
                hi_rows.append(list(hi))
                return
            axis = t[0]
            m = len(cut_axis)
            cut_axis.append(axis)
            cut_lo.append(lo[axis])
            cut_hi.append(hi[axis])
            src = 2 * n + m
            hi_left = list(hi)
            hi_left[axis] = src
            walk(t[1], lo, hi_left)
            lo_right = list(lo)
            lo_right[axis] = src
            walk(t[2], lo_right, hi)

        walk(self.tree, list(range(n)), list(range(n, 2 * n)))
        # cut indices are assigned in pre-order, leaves in in-order
        return (np.array(lo_rows, dtype=np.int64), np.array(hi_rows, dtype=np.int64),
                np.array(cut_axis, dtype=np.int64), np.array(cut_lo, dtype=np.int64),
                np.array(cut_hi, dtype=np.int64))

    @property
    def n_leaves(self) -> int:
        return self._lo_idx.shape[0]

    mu = n_leaves

    @property
    def n_cuts(self) -> int:
        return self._cut_axis.size

    @property
    def n_sources(self) -> int:
        return 2 * self.n_x + self.n_cuts

    @property
    def cut_axes(self) -> np.ndarray:
        return self._cut_axis.copy()

    @property
    def leaf_lo_sources(self) -> np.ndarray:
        """(mu, n_x) indices into the source vector for leaf lower corners."""
        return self._lo_idx.copy()

    @property
    def leaf_hi_sources(self) -> np.ndarray:
        return self._hi_idx.copy()

    def sources(self, bounding: Hyperrect, cuts) -> np.ndarray:
        cuts = np.asarray(cuts, dtype=float).reshape(-1)
        if cuts.size != self.n_cuts:
            raise ValueError(f"expected {self.n_cuts} cuts, got {cuts.size}")
        return np.concatenate([bounding.lo, bounding.hi, cuts])

    def leaf_corners(self, bounding: Hyperrect, cuts) -> tuple[np.ndarray, np.ndarray]:
        """Leaf lower and upper corners as (mu, n_x) arrays (no ordering checks)."""
        src = self.sources(bounding, cuts)
        return src[self._lo_idx], src[self._hi_idx]

    def tiling_rows(self) -> list[tuple[int, int]]:
        """Pairs ``(a, b)`` of source indices meaning ``src[a] - src[b] >= 0``."""
        rows = []
        for m in range(self.n_cuts):
            c = 2 * self.n_x + m
            rows.append((c, int(self._cut_lo[m])))
            rows.append((int(self._cut_hi[m]), c))
        return rows

    def cut_interval(self, m: int, bounding: Hyperrect, cuts) -> tuple[float, float]:
        src = self.sources(bounding, cuts)
        return float(src[self._cut_lo[m]]), float(src[self._cut_hi[m]])

    def default_cuts(self, bounding: Hyperrect, frac: float = 0.5) -> np.ndarray:
        """Cuts placed at fraction ``frac`` of each node's inherited interval."""
        src = np.concatenate([bounding.lo, bounding.hi, np.zeros(self.n_cuts)])
        for m in range(self.n_cuts):  # pre-order: parents first
            lo, hi = src[self._cut_lo[m]], src[self._cut_hi[m]]
            src[2 * self.n_x + m] = lo + frac * (hi - lo)
        return src[2 * self.n_x:].copy()

    def leaf_of_point(self, bounding: Hyperrect, cuts, x) -> int:
        """Index of a leaf containing ``x`` (first in leaf order), or the closest leaf."""
        lo, hi = self.leaf_corners(bounding, cuts)
        x = np.asarray(x, dtype=float)
        exc = np.maximum(np.maximum(lo - x, x - hi), 0.0).max(axis=1)
        return int(np.argmin(exc))


def leaf_boxes(spec: PartitionSpec, bounding: Hyperrect, cuts) -> list[Hyperrect]:
    """Leaf boxes in leaf order; cuts must lie in their inherited intervals."""
    lo, hi = spec.leaf_corners(bounding, cuts)
    return [Hyperrect(lo[s], hi[s]) for s in range(spec.n_leaves)]


@dataclass(frozen=True)
class LinearRow:
    """``sum(coef * symbol) >= 0`` over named symbols."""

    terms: tuple[tuple[str, float], ...]

    def value(self, env: dict) -> float:
        return float(sum(c * env[s] for s, c in self.terms))


def tiling_constraints(spec: PartitionSpec, corner_symbols: Sequence[str] | None = None,
                       cut_symbols: Sequence[str] | None = None) -> list[LinearRow]:
    """Per internal node: ``lo_axis <= c`` and ``c <= hi_axis`` as linear rows."""
    n = spec.n_x
    corner_symbols = list(corner_symbols or [f"lo{i}" for i in range(n)] + [f"hi{i}" for i in range(n)])
    cut_symbols = list(cut_symbols or [f"c{m}" for m in range(spec.n_cuts)])
    names = corner_symbols + cut_symbols
    return [LinearRow(((names[a], 1.0), (names[b], -1.0))) for a, b in spec.tiling_rows()]


@dataclass(frozen=True)
class TilingReport:
    ok: bool
    n_samples: int
    uncovered: int
    overlapping: int
    volume_error: float
    max_multiplicity: int


def validate_tiling(boxes: Sequence[Hyperrect], bounding: Hyperrect, n_samples: int = 10_000,
                    seed: int = 0, tol: float = 1e-12) -> TilingReport:
    """Sample the bounding box; every point must lie in exactly one box."""
    if not boxes:
        raise ValueError("no boxes to validate")
    rng = np.random.default_rng(seed)
    pts = bounding.sample(rng, n_samples)
    count = np.zeros(n_samples, dtype=np.int64)
    for b in boxes:
        inside = np.all((pts >= b.lo - tol) & (pts <= b.hi + tol), axis=1)
        count += inside
    vol = bounding.volume()
    vsum = float(sum(b.volume() for b in boxes))
    verr = abs(vsum - vol) / vol if vol > 0 else abs(vsum)
    uncovered = int(np.count_nonzero(count == 0))
    overlapping = int(np.count_nonzero(count > 1))
    contained = all(bounding.contains(b, tol) for b in boxes)
    ok = uncovered == 0 and overlapping == 0 and verr <= 1e-10 and contained
    return TilingReport(ok, n_samples, uncovered, overlapping, verr, int(count.max()))


def _shape(t):
    return None if t is None else (t[0], _shape(t[1]), _shape(t[2]))


def _count(t) -> int:
    return 0 if t is None else 1 + _count(t[1]) + _count(t[2])


def clip_cuts(spec: PartitionSpec, cuts, bounding: Hyperrect) -> np.ndarray:
    """Move cuts into ``bounding`` so that leaves stay inside the original leaves where possible.

    Each cut is clipped into its node's inherited interval.  When a clip makes
    one child degenerate and both children have the same shape, the degenerate
    child copies the cut values of its sibling, which keeps its (flat) leaves
    inside the sibling's original leaves.
    """
    cuts = np.asarray(cuts, dtype=float).reshape(-1)
    if cuts.size != spec.n_cuts:
        raise ValueError(f"expected {spec.n_cuts} cuts, got {cuts.size}")

    def walk(t, old: list, lo: np.ndarray, hi: np.ndarray) -> list:
        if t is None:
            return []
        axis = t[0]
        nl = _count(t[1])
        c = float(np.clip(old[0], lo[axis], hi[axis]))
        old_l, old_r = old[1:1 + nl], old[1 + nl:]
        hi_l = hi.copy()
        hi_l[axis] = c
        lo_r = lo.copy()
        lo_r[axis] = c
        same = _shape(t[1]) == _shape(t[2])
        if same and c <= lo[axis] < hi[axis]:
            right = walk(t[2], old_r, lo_r, hi)
            left = walk(t[1], right, lo, hi_l)
        elif same and c >= hi[axis] > lo[axis]:
            left = walk(t[1], old_l, lo, hi_l)
            right = walk(t[2], left, lo_r, hi)
        else:
            left = walk(t[1], old_l, lo, hi_l)
            right = walk(t[2], old_r, lo_r, hi)
        return [c] + left + right

    return np.array(walk(spec.tree, list(cuts), bounding.lo.copy(), bounding.hi.copy()), dtype=float)
