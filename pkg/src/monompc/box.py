"""Axis-aligned boxes."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Hyperrect:
    """Closed box ``[lo, hi]`` in ``n`` dimensions (``n`` may be 0 for empty groups)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float).reshape(-1)
        hi = np.array(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError(f"box bounds differ in size: {lo.size} vs {hi.size}")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("box bounds contain NaN")
        if np.any(lo > hi):
            bad = int(np.flatnonzero(lo > hi)[0])
            raise ValueError(f"box is empty in dimension {bad}: lo={lo[bad]} > hi={hi[bad]}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def point(cls, x) -> "Hyperrect":
        x = np.asarray(x, dtype=float).reshape(-1)
        return cls(x, x)

    @classmethod
    def empty_group(cls) -> "Hyperrect":
        return cls(np.zeros(0), np.zeros(0))

    @classmethod
    def hull(cls, boxes) -> "Hyperrect":
        boxes = list(boxes)
        lo = np.min([b.lo for b in boxes], axis=0)
        hi = np.max([b.hi for b in boxes], axis=0)
        return cls(lo, hi)

    @classmethod
    def hull_of_points(cls, pts) -> "Hyperrect":
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def n(self) -> int:
        return self.lo.size

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def volume(self) -> float:
        return float(np.prod(self.width))

    def contains_point(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def contains(self, other: "Hyperrect", tol: float = 0.0) -> bool:
        return bool(np.all(other.lo >= self.lo - tol) and np.all(other.hi <= self.hi + tol))

    def excess(self, other: "Hyperrect") -> np.ndarray:
        """Per-dimension amount by which ``other`` sticks out of this box."""
        return np.maximum(np.maximum(self.lo - other.lo, other.hi - self.hi), 0.0)

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lo, self.hi)

    def intersect(self, other: "Hyperrect") -> "Hyperrect | None":
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if np.any(lo > hi):
            return None
        return Hyperrect(lo, hi)

    def scaled(self, factor: float) -> "Hyperrect":
        """Box with the same center and widths multiplied by ``factor``."""
        c, h = self.center, 0.5 * self.width * factor
        return Hyperrect(c - h, c + h)

    def vertices(self) -> np.ndarray:
        """All 2^n corners (duplicates kept for degenerate dimensions)."""
        if self.n == 0:
            return np.zeros((1, 0))
        return np.array(list(itertools.product(*zip(self.lo, self.hi))), dtype=float)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lo + rng.random((n, self.n)) * self.width

    def product(self, other: "Hyperrect") -> "Hyperrect":
        return Hyperrect(np.concatenate([self.lo, other.lo]), np.concatenate([self.hi, other.hi]))

    def allclose(self, other: "Hyperrect", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return bool(np.allclose(self.lo, other.lo, atol=atol, rtol=rtol)
                    and np.allclose(self.hi, other.hi, atol=atol, rtol=rtol))

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Hyperrect":
        return cls(d["lo"], d["hi"])

    def __repr__(self) -> str:
        return f"Hyperrect(lo={self.lo.tolist()}, hi={self.hi.tolist()})"
