"""Robust MPC toolkit built on mixed-monotone reachable sets and partition-based recourse."""

from .box import Hyperrect
from .exprgraph import (
    DecompGraph,
    ExprGraph,
    GraphBuilder,
    check_monotone,
    differentiate,
    evaluate,
    synth_decomposition,
    tight_decomposition_oracle,
)

__version__ = "0.1.0"

__all__ = [
    "DecompGraph",
    "ExprGraph",
    "GraphBuilder",
    "Hyperrect",
    "check_monotone",
    "differentiate",
    "evaluate",
    "synth_decomposition",
    "tight_decomposition_oracle",
]
