"""Expression graphs: construction, evaluation, differentiation, interval
analysis, monotonicity certification and synthesis of decomposition functions.

Graphs are built with :class:`GraphBuilder` (hash-consed, constant folded) and
frozen into an :class:`ExprGraph`, a topologically ordered tape that the
compiled kernels in :mod:`monompc._tape` evaluate in batches.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import _tape
from ._tape import ADD, CONST, DIV, EXP, INPUT, MAX, MIN, MUL, NEG, OP_NAMES, POW, SUB
from .box import Hyperrect

GRAPH_FORMAT = "monompc-exprgraph"
DECOMP_FORMAT = "monompc-decomposition"
FORMAT_VERSION = 1

_BINARY = (ADD, SUB, MUL, DIV, MIN, MAX)
_COMMUTATIVE = (ADD, MUL, MIN, MAX)


class GraphError(ValueError):
    """Structurally invalid graph or unsupported operation."""


class DomainError(ArithmeticError):
    """Evaluation left the declared validity domain of a div or pow node."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


class DecompositionError(ValueError):
    """A product or quotient factor has no certified sign over the box."""

    def __init__(self, message: str, node: int, interval: tuple[float, float]):
        super().__init__(message)
        self.node = node
        self.interval = interval


class OrderingError(ValueError):
    pass


class CapacityError(ValueError):
    pass


# --------------------------------------------------------------------------
# construction


class Expr:
    """Handle to a node inside a :class:`GraphBuilder`; supports arithmetic."""

    __slots__ = ("builder", "idx")

    def __init__(self, builder: "GraphBuilder", idx: int):
        self.builder = builder
        self.idx = idx

    def _wrap(self, other) -> "Expr":
        if isinstance(other, Expr):
            if other.builder is not self.builder:
                raise GraphError("cannot mix expressions from different builders")
            return other
        return self.builder.const(float(other))

    def __add__(self, o):
        return self.builder.op(ADD, self, self._wrap(o))

    def __radd__(self, o):
        return self.builder.op(ADD, self._wrap(o), self)

    def __sub__(self, o):
        return self.builder.op(SUB, self, self._wrap(o))

    def __rsub__(self, o):
        return self.builder.op(SUB, self._wrap(o), self)

    def __mul__(self, o):
        return self.builder.op(MUL, self, self._wrap(o))

    def __rmul__(self, o):
        return self.builder.op(MUL, self._wrap(o), self)

    def __truediv__(self, o):
        return self.builder.op(DIV, self, self._wrap(o))

    def __rtruediv__(self, o):
        return self.builder.op(DIV, self._wrap(o), self)

    def __neg__(self):
        return self.builder.op(NEG, self)

    def __pos__(self):
        return self

    def __pow__(self, n):
        return power(self, n)

    @property
    def is_const(self) -> bool:
        return self.builder.nodes[self.idx][0] == CONST

    @property
    def value(self) -> float | None:
        node = self.builder.nodes[self.idx]
        return node[3] if node[0] == CONST else None

    def __repr__(self) -> str:
        node = self.builder.nodes[self.idx]
        return f"Expr({OP_NAMES[node[0]]}#{self.idx})"


def exp(e):
    if isinstance(e, Expr):
        return e.builder.op(EXP, e)
    return math.exp(e)


def power(e, n: int, sign: int = 0):
    """``e**n`` for a constant integer ``n >= 1``; ``sign`` declares the base sign (+1 nonneg, -1 nonpos)."""
    if int(n) != n or n < 1:
        raise GraphError(f"power exponent must be an integer >= 1, got {n!r}")
    if isinstance(e, Expr):
        return e.builder.op(POW, e, val=float(int(n)), sgn=sign)
    return float(e) ** int(n)


def div(a, b, sign: int = 0):
    """``a / b`` with a declared denominator sign (+1 positive, -1 negative, 0 nonzero)."""
    if isinstance(a, Expr):
        bld = a.builder
    elif isinstance(b, Expr):
        bld = b.builder
    else:
        return float(a) / float(b)
    a = a if isinstance(a, Expr) else bld.const(float(a))
    b = b if isinstance(b, Expr) else bld.const(float(b))
    return bld.op(DIV, a, b, sgn=sign)


def minimum(a, b):
    bld = a.builder if isinstance(a, Expr) else b.builder
    a = a if isinstance(a, Expr) else bld.const(float(a))
    b = b if isinstance(b, Expr) else bld.const(float(b))
    return bld.op(MIN, a, b)


def maximum(a, b):
    bld = a.builder if isinstance(a, Expr) else b.builder
    a = a if isinstance(a, Expr) else bld.const(float(a))
    b = b if isinstance(b, Expr) else bld.const(float(b))
    return bld.op(MAX, a, b)


def _fold(op: int, x: float, y: float, val: float) -> float:
    if op == ADD:
        return x + y
    if op == SUB:
        return x - y
    if op == MUL:
        return x * y
    if op == DIV:
        if y == 0.0:
            raise DomainError("constant division by zero")
        return x / y
    if op == NEG:
        return -x
    if op == EXP:
        return math.exp(x)
    if op == POW:
        return x ** int(val)
    if op == MIN:
        return min(x, y)
    return max(x, y)


class GraphBuilder:
    """Mutable node pool with hash-consing and constant folding."""

    def __init__(self):
        # node: (op, a, b, val, sgn, sym)
        self.nodes: list[tuple] = []
        self._index: dict[tuple, int] = {}

    def _intern(self, key: tuple) -> Expr:
        idx = self._index.get(key)
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(key)
            self._index[key] = idx
        return Expr(self, idx)

    def const(self, c: float) -> Expr:
        c = float(c)
        if c == 0.0:
            c = 0.0  # merge -0.0
        return self._intern((CONST, -1, -1, c, 0, None))

    def symbol(self, group: str, index: int) -> Expr:
        return self._intern((INPUT, -1, -1, 0.0, 0, (group, int(index))))

    def symbols(self, group: str, n: int) -> list[Expr]:
        return [self.symbol(group, i) for i in range(n)]

    def _cval(self, e: Expr):
        node = self.nodes[e.idx]
        return node[3] if node[0] == CONST else None

    def op(self, op: int, a: Expr, b: Expr | None = None, val: float = 0.0, sgn: int = 0) -> Expr:
        ca = self._cval(a)
        cb = self._cval(b) if b is not None else None
        if op in _BINARY:
            if ca is not None and cb is not None:
                return self.const(_fold(op, ca, cb, val))
            if op == ADD:
                if ca == 0.0:
                    return b
                if cb == 0.0:
                    return a
            elif op == SUB:
                if cb == 0.0:
                    return a
                if ca == 0.0:
                    return self.op(NEG, b)
                if a.idx == b.idx:
                    return self.const(0.0)
            elif op == MUL:
                if ca == 0.0 or cb == 0.0:
                    return self.const(0.0)
                if ca == 1.0:
                    return b
                if cb == 1.0:
                    return a
                if ca == -1.0:
                    return self.op(NEG, b)
                if cb == -1.0:
                    return self.op(NEG, a)
            elif op == DIV:
                if cb == 0.0:
                    raise DomainError("division by constant zero")
                if cb == 1.0:
                    return a
                if ca == 0.0:
                    return self.const(0.0)
            elif op in (MIN, MAX) and a.idx == b.idx:
                return a
            ia, ib = a.idx, b.idx
            if op in _COMMUTATIVE and ia > ib:
                ia, ib = ib, ia
            return self._intern((op, ia, ib, 0.0, int(sgn) if op == DIV else 0, None))
        # unary
        if ca is not None:
            if op == POW and sgn and ca * sgn < 0:
                raise DomainError("constant power base violates its declared sign")
            return self.const(_fold(op, ca, 0.0, val))
        if op == NEG:
            node = self.nodes[a.idx]
            if node[0] == NEG:
                return Expr(self, node[1])
            return self._intern((NEG, a.idx, -1, 0.0, 0, None))
        if op == EXP:
            return self._intern((EXP, a.idx, -1, 0.0, 0, None))
        if op == POW:
            if int(val) == 1:
                return a
            return self._intern((POW, a.idx, -1, float(int(val)), int(sgn), None))
        raise GraphError(f"unknown operator code {op}")

    def graph(self, outputs: Sequence, groups: Sequence[tuple[str, int]]) -> "ExprGraph":
        """Freeze the nodes reachable from ``outputs`` into an :class:`ExprGraph`."""
        outs = [o if isinstance(o, Expr) else self.const(float(o)) for o in outputs]
        for o in outs:
            if o.builder is not self:
                raise GraphError("output expression belongs to another builder")
        groups = tuple((str(n), int(s)) for n, s in groups)
        offsets, off = {}, 0
        for name, size in groups:
            if name in offsets:
                raise GraphError(f"duplicate symbol group {name!r}")
            offsets[name] = (off, size)
            off += size
        keep = np.zeros(len(self.nodes), dtype=bool)
        stack = [o.idx for o in outs]
        while stack:
            i = stack.pop()
            if keep[i]:
                continue
            keep[i] = True
            node = self.nodes[i]
            if node[1] >= 0:
                stack.append(node[1])
            if node[2] >= 0:
                stack.append(node[2])
        order = np.flatnonzero(keep)
        remap = {int(old): new for new, old in enumerate(order)}
        n = len(order)
        op = np.empty(n, dtype=np.int64)
        a = np.full(n, -1, dtype=np.int64)
        b = np.full(n, -1, dtype=np.int64)
        val = np.zeros(n)
        sgn = np.zeros(n, dtype=np.int64)
        for new, old in enumerate(order):
            o, ca, cb, v, s, sym = self.nodes[old]
            op[new] = o
            val[new] = v
            sgn[new] = s
            if o == INPUT:
                name, k = sym
                if name not in offsets or not 0 <= k < offsets[name][1]:
                    raise GraphError(f"symbol {name}[{k}] is not in the declared groups {groups}")
                a[new] = offsets[name][0] + k
            else:
                if ca >= 0:
                    a[new] = remap[ca]
                if cb >= 0:
                    b[new] = remap[cb]
        out_idx = np.array([remap[o.idx] for o in outs], dtype=np.int64)
        return ExprGraph(op, a, b, val, sgn, groups, out_idx)


# --------------------------------------------------------------------------
# frozen graph


class ExprGraph:
    """Immutable expression DAG with ordered symbol groups and output list."""

    __slots__ = ("op", "a", "b", "val", "sgn", "groups", "outputs", "_offsets")

    def __init__(self, op, a, b, val, sgn, groups, outputs):
        self.op = np.ascontiguousarray(op, dtype=np.int64)
        self.a = np.ascontiguousarray(a, dtype=np.int64)
        self.b = np.ascontiguousarray(b, dtype=np.int64)
        self.val = np.ascontiguousarray(val, dtype=float)
        self.sgn = np.ascontiguousarray(sgn, dtype=np.int64)
        self.outputs = np.ascontiguousarray(outputs, dtype=np.int64)
        self.groups = tuple((str(n), int(s)) for n, s in groups)
        offs, off = {}, 0
        for name, size in self.groups:
            offs[name] = (off, size)
            off += size
        self._offsets = offs
        for arr in (self.op, self.a, self.b, self.val, self.sgn, self.outputs):
            arr.setflags(write=False)
        self._validate()

    def _validate(self):
        n = self.op.size
        n_in = self.n_in
        for i in range(n):
            o = self.op[i]
            if o < CONST or o > MAX:
                raise GraphError(f"node {i}: unknown operator code {o}")
            if o == INPUT:
                if not 0 <= self.a[i] < n_in:
                    raise GraphError(f"node {i}: input index {self.a[i]} out of range")
                continue
            if o == CONST:
                continue
            if not 0 <= self.a[i] < i:
                raise GraphError(f"node {i}: child {self.a[i]} does not precede it")
            if o in _BINARY and not 0 <= self.b[i] < i:
                raise GraphError(f"node {i}: child {self.b[i]} does not precede it")
            if o == POW and (self.val[i] < 1 or int(self.val[i]) != self.val[i]):
                raise GraphError(f"node {i}: power exponent must be an integer >= 1")
        if np.any(self.outputs < 0) or np.any(self.outputs >= n):
            raise GraphError("output index out of range")

    # sizes -----------------------------------------------------------------
    @property
    def n_in(self) -> int:
        return sum(s for _, s in self.groups)

    @property
    def n_out(self) -> int:
        return self.outputs.size

    @property
    def n_nodes(self) -> int:
        return self.op.size

    def group_size(self, name: str) -> int:
        return self._offsets[name][1] if name in self._offsets else 0

    def group_slice(self, name: str) -> slice:
        off, size = self._offsets[name]
        return slice(off, off + size)

    def has_group(self, name: str) -> bool:
        return name in self._offsets

    def node_label(self, i: int) -> str:
        o = int(self.op[i])
        if o == INPUT:
            name, k = self.symbol_of(int(self.a[i]))
            return f"node {i} (symbol {name}[{k}])"
        return f"node {i} ({OP_NAMES[o]})"

    def symbol_of(self, flat: int) -> tuple[str, int]:
        for name, (off, size) in self._offsets.items():
            if off <= flat < off + size:
                return name, flat - off
        raise IndexError(flat)

    # evaluation -------------------------------------------------------------
    def _stack_inputs(self, args, kwargs) -> tuple[np.ndarray, tuple]:
        if len(args) > len(self.groups):
            raise GraphError(f"expected at most {len(self.groups)} positional groups")
        values = {}
        for (name, _), arg in zip(self.groups, args):
            values[name] = arg
        for name, arg in kwargs.items():
            if name not in self._offsets:
                raise GraphError(f"unknown symbol group {name!r}")
            if name in values:
                raise GraphError(f"group {name!r} given twice")
            values[name] = arg
        parts, leads = [], []
        for name, size in self.groups:
            if name not in values:
                if size == 0:
                    values[name] = np.zeros(0)
                else:
                    raise GraphError(f"missing values for symbol group {name!r}")
            arr = np.asarray(values[name], dtype=float)
            if size == 1 and (arr.ndim == 0 or arr.shape[-1] != 1):
                arr = arr[..., None]
            if arr.shape[-1:] != (size,):
                raise GraphError(f"group {name!r} expects size {size}, got shape {arr.shape}")
            parts.append(arr)
            leads.append(arr.shape[:-1])
        lead = np.broadcast_shapes(*leads) if leads else ()
        parts = [np.broadcast_to(p, lead + p.shape[-1:]) for p in parts]
        X = np.concatenate(parts, axis=-1) if parts else np.zeros(lead + (0,))
        return np.ascontiguousarray(X.reshape(-1, self.n_in)), lead

    def eval_rows(self, X: np.ndarray) -> np.ndarray:
        """Evaluate on a (rows, n_in) array of flat inputs."""
        X = np.ascontiguousarray(X, dtype=float)
        Y, bad, row = _tape.eval_batch(self.op, self.a, self.b, self.val, self.sgn, self.outputs, X)
        if bad >= 0:
            raise DomainError(f"domain violation at {self.node_label(bad)} (row {row})", bad)
        return Y

    def jac_rows(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values and Jacobians (rows, n_out, n_in) on flat inputs."""
        X = np.ascontiguousarray(X, dtype=float)
        Y, J, bad, row = _tape.jac_batch(self.op, self.a, self.b, self.val, self.sgn, self.outputs, X)
        if bad >= 0:
            raise DomainError(f"domain violation at {self.node_label(bad)} (row {row})", bad)
        return Y, J

    def evaluate(self, *args, **kwargs) -> np.ndarray:
        X, lead = self._stack_inputs(args, kwargs)
        return self.eval_rows(X).reshape(lead + (self.n_out,))

    __call__ = evaluate

    def jacobian(self, *args, wrt: str | Sequence[str] | None = None, **kwargs):
        """Numeric (values, Jacobian) with Jacobian columns restricted to ``wrt`` groups."""
        X, lead = self._stack_inputs(args, kwargs)
        Y, J = self.jac_rows(X)
        if wrt is not None:
            names = [wrt] if isinstance(wrt, str) else list(wrt)
            cols = np.concatenate([np.arange(self.n_in)[self.group_slice(n)] for n in names])
            J = J[:, :, cols]
        return Y.reshape(lead + (self.n_out,)), J.reshape(lead + J.shape[1:])

    # symbolic reuse ---------------------------------------------------------
    def apply(self, builder: GraphBuilder, inputs: Mapping[str, Sequence]) -> list[Expr]:
        """Instantiate this graph inside ``builder`` with symbols replaced by ``inputs``."""
        flat: list = []
        for name, size in self.groups:
            vals = list(inputs.get(name, [])) if size else []
            if len(vals) != size:
                raise GraphError(f"group {name!r} needs {size} expressions, got {len(vals)}")
            flat.extend(v if isinstance(v, Expr) else builder.const(float(v)) for v in vals)
        ex: list[Expr] = []
        for i in range(self.n_nodes):
            o = int(self.op[i])
            if o == CONST:
                ex.append(builder.const(self.val[i]))
            elif o == INPUT:
                ex.append(flat[self.a[i]])
            elif o in _BINARY:
                ex.append(builder.op(o, ex[self.a[i]], ex[self.b[i]], sgn=int(self.sgn[i])))
            else:
                ex.append(builder.op(o, ex[self.a[i]], val=float(self.val[i]), sgn=int(self.sgn[i])))
        return [ex[j] for j in self.outputs]

    def select(self, rows: Sequence[int]) -> "ExprGraph":
        """Graph with a subset of outputs."""
        b = GraphBuilder()
        outs = self.apply(b, {n: b.symbols(n, s) for n, s in self.groups})
        return b.graph([outs[i] for i in rows], self.groups)

    # serialization ----------------------------------------------------------
    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            o = int(self.op[i])
            if o == CONST:
                nodes.append({"op": "const", "value": float(self.val[i])})
            elif o == INPUT:
                name, k = self.symbol_of(int(self.a[i]))
                nodes.append({"op": "symbol", "group": name, "index": k})
            else:
                d = {"op": OP_NAMES[o], "args": [int(self.a[i])]}
                if o in _BINARY:
                    d["args"].append(int(self.b[i]))
                if o == POW:
                    d["exponent"] = int(self.val[i])
                if o in (DIV, POW) and self.sgn[i]:
                    d["sign"] = int(self.sgn[i])
                nodes.append(d)
        return {
            "format": GRAPH_FORMAT,
            "version": FORMAT_VERSION,
            "groups": [{"name": n, "size": s} for n, s in self.groups],
            "nodes": nodes,
            "outputs": [int(o) for o in self.outputs],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExprGraph":
        if d.get("format") != GRAPH_FORMAT:
            raise GraphError(f"not an expression graph document (format={d.get('format')!r})")
        if d.get("version") != FORMAT_VERSION:
            raise GraphError(f"unsupported graph format version {d.get('version')!r}")
        groups = [(g["name"], int(g["size"])) for g in d["groups"]]
        offsets, off = {}, 0
        for name, size in groups:
            offsets[name] = (off, size)
            off += size
        codes = {name: k for k, name in enumerate(OP_NAMES)}
        n = len(d["nodes"])
        op = np.empty(n, dtype=np.int64)
        a = np.full(n, -1, dtype=np.int64)
        b = np.full(n, -1, dtype=np.int64)
        val = np.zeros(n)
        sgn = np.zeros(n, dtype=np.int64)
        for i, nd in enumerate(d["nodes"]):
            if nd["op"] not in codes:
                raise GraphError(f"node {i}: unknown operator {nd['op']!r}")
            o = codes[nd["op"]]
            op[i] = o
            if o == CONST:
                val[i] = float(nd["value"])
            elif o == INPUT:
                name, k = nd["group"], int(nd["index"])
                if name not in offsets or not 0 <= k < offsets[name][1]:
                    raise GraphError(f"node {i}: symbol {name}[{k}] not declared")
                a[i] = offsets[name][0] + k
            else:
                args = nd["args"]
                a[i] = int(args[0])
                if o in _BINARY:
                    b[i] = int(args[1])
                if o == POW:
                    val[i] = float(nd["exponent"])
                sgn[i] = int(nd.get("sign", 0))
        return cls(op, a, b, val, sgn, groups, d["outputs"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ExprGraph":
        return cls.from_dict(json.loads(text))

    def __repr__(self) -> str:
        gs = ", ".join(f"{n}:{s}" for n, s in self.groups)
        return f"ExprGraph(groups=({gs}), nodes={self.n_nodes}, outputs={self.n_out})"


def evaluate(g: ExprGraph, *args, **kwargs) -> np.ndarray:
    """Evaluate ``g`` at group values given positionally (in group order) or by name."""
    return g.evaluate(*args, **kwargs)


def build_graph(fn, groups: Sequence[tuple[str, int]]) -> ExprGraph:
    """Build a graph from ``fn(*symbol_lists) -> list of outputs``."""
    b = GraphBuilder()
    syms = [b.symbols(n, s) for n, s in groups]
    outs = fn(*syms)
    return b.graph(list(outs), groups)


# --------------------------------------------------------------------------
# differentiation


def _symbolic_grads(b: GraphBuilder, root: Expr) -> dict[int, Expr]:
    """Reverse sweep from ``root``; returns adjoints of reached symbol nodes."""
    nodes = b.nodes
    adj: dict[int, Expr] = {root.idx: b.const(1.0)}
    grads: dict[int, Expr] = {}

    def push(i, e):
        if e.is_const and e.value == 0.0:
            return
        adj[i] = adj[i] + e if i in adj else e

    for i in range(root.idx, -1, -1):
        w = adj.pop(i, None)
        if w is None:
            continue
        o, ia, ib, val, sgn, _ = nodes[i]
        if o == INPUT:
            grads[i] = w
        elif o == CONST:
            continue
        elif o == ADD:
            push(ia, w)
            push(ib, w)
        elif o == SUB:
            push(ia, w)
            push(ib, -w)
        elif o == NEG:
            push(ia, -w)
        elif o == MUL:
            ea, eb = Expr(b, ia), Expr(b, ib)
            push(ia, w * eb)
            push(ib, w * ea)
        elif o == DIV:
            ea, eb, ei = Expr(b, ia), Expr(b, ib), Expr(b, i)
            push(ia, div(w, eb, sgn))
            push(ib, -div(w * ei, eb, sgn))
        elif o == EXP:
            push(ia, w * Expr(b, i))
        elif o == POW:
            k = int(val)
            base = Expr(b, ia)
            d = base if k == 2 else power(base, k - 1, sgn)
            push(ia, w * (k * d))
        else:
            raise GraphError("min2/max2 nodes are not differentiable")
    return grads


def differentiate(g: ExprGraph, wrt: str | Sequence[str]) -> ExprGraph:
    """Graph of the Jacobian block d outputs / d ``wrt`` laid out row-major.

    ``wrt`` is a group name or a sequence of group names whose columns are
    concatenated in the given order.
    """
    names = [wrt] if isinstance(wrt, str) else list(wrt)
    for n in names:
        if not g.has_group(n):
            raise GraphError(f"unknown symbol group {n!r}")
    b = GraphBuilder()
    ins = {n: b.symbols(n, s) for n, s in g.groups}
    outs = g.apply(b, ins)
    cols = [e.idx for n in names for e in ins[n]]
    entries: list[Expr] = []
    zero = b.const(0.0)
    for out in outs:
        grads = _symbolic_grads(b, out)
        entries.extend(grads.get(c, zero) for c in cols)
    return b.graph(entries, g.groups)


# --------------------------------------------------------------------------
# interval evaluation


def _box_bounds(g: ExprGraph, boxes: Mapping[str, Hyperrect]) -> tuple[np.ndarray, np.ndarray]:
    lo = np.empty(g.n_in)
    hi = np.empty(g.n_in)
    for name, size in g.groups:
        sl = g.group_slice(name)
        if size == 0:
            continue
        if name not in boxes or boxes[name] is None:
            raise GraphError(f"no box given for symbol group {name!r}")
        box = boxes[name]
        if box.n != size:
            raise GraphError(f"box for group {name!r} has size {box.n}, expected {size}")
        lo[sl] = box.lo
        hi[sl] = box.hi
    return lo, hi


def _mul_iv(la, ha, lb, hb):
    ps = (la * lb, la * hb, ha * lb, ha * hb)
    return min(ps), max(ps)


def interval_eval(g: ExprGraph, boxes: Mapping[str, Hyperrect]) -> tuple[np.ndarray, np.ndarray]:
    """Natural interval enclosure of every node over the product of group boxes."""
    xlo, xhi = _box_bounds(g, boxes)
    n = g.n_nodes
    lo = np.empty(n)
    hi = np.empty(n)
    op, A, B, val, sgn = g.op, g.a, g.b, g.val, g.sgn
    for i in range(n):
        o = op[i]
        if o == CONST:
            lo[i] = hi[i] = val[i]
            continue
        if o == INPUT:
            lo[i], hi[i] = xlo[A[i]], xhi[A[i]]
            continue
        la, ha = lo[A[i]], hi[A[i]]
        if o in _BINARY:
            lb, hb = lo[B[i]], hi[B[i]]
        if o == ADD:
            lo[i], hi[i] = la + lb, ha + hb
        elif o == SUB:
            lo[i], hi[i] = la - hb, ha - lb
        elif o == NEG:
            lo[i], hi[i] = -ha, -la
        elif o == MUL:
            lo[i], hi[i] = _mul_iv(la, ha, lb, hb)
        elif o == DIV:
            s = sgn[i]
            if (lb <= 0.0 <= hb) or (s == 1 and lb <= 0.0) or (s == -1 and hb >= 0.0):
                raise DomainError(
                    f"denominator of {g.node_label(i)} ranges over [{lb:.6g}, {hb:.6g}] "
                    f"which leaves its validity domain", i)
            lo[i], hi[i] = _mul_iv(la, ha, 1.0 / hb, 1.0 / lb)
        elif o == EXP:
            lo[i] = math.exp(la) if la < 700 else math.inf
            hi[i] = math.exp(ha) if ha < 700 else math.inf
        elif o == POW:
            k = int(val[i])
            s = sgn[i]
            if (s == 1 and la < 0.0) or (s == -1 and ha > 0.0):
                raise DomainError(
                    f"base of {g.node_label(i)} ranges over [{la:.6g}, {ha:.6g}] "
                    f"which violates its declared sign", i)
            if k % 2 == 1 or la >= 0.0:
                lo[i], hi[i] = la ** k, ha ** k
            elif ha <= 0.0:
                lo[i], hi[i] = ha ** k, la ** k
            else:
                lo[i], hi[i] = 0.0, max(la ** k, ha ** k)
        elif o == MIN:
            lo[i], hi[i] = min(la, lb), min(ha, hb)
        else:
            lo[i], hi[i] = max(la, lb), max(ha, hb)
    return lo, hi


def interval_outputs(g: ExprGraph, boxes: Mapping[str, Hyperrect]) -> Hyperrect:
    lo, hi = interval_eval(g, boxes)
    return Hyperrect(lo[g.outputs], hi[g.outputs])


def _xup_boxes(g: ExprGraph, box_x, box_u, box_p) -> dict:
    boxes = {}
    for name, box in (("x", box_x), ("u", box_u), ("p", box_p)):
        if box is None:
            box = Hyperrect.empty_group()
        if not isinstance(box, Hyperrect):
            box = Hyperrect.point(box)
        boxes[name] = box
    return boxes


# --------------------------------------------------------------------------
# monotonicity


NONNEG, NONPOS, MIXED = "nonneg", "nonpos", "mixed"


@dataclass(frozen=True)
class SignReport:
    """Certified signs of each Jacobian entry, per symbol group."""

    groups: tuple[tuple[str, int], ...]
    n_out: int
    signs: dict  # group -> (n_out, size) array of str
    lo: dict  # group -> lower bounds of the entries
    hi: dict

    @property
    def monotone(self) -> bool:
        """All state and parameter sensitivities certified nonnegative."""
        return all(self.row_monotone(i) for i in range(self.n_out))

    def row_monotone(self, i: int) -> bool:
        return all(np.all(self.signs[n][i] == NONNEG) for n in ("x", "p") if n in self.signs)

    def row_antitone(self, i: int) -> bool:
        return all(np.all(self.signs[n][i] == NONPOS) for n in ("x", "p") if n in self.signs)

    def sign(self, i: int, group: str, j: int) -> str:
        return str(self.signs[group][i, j])

    def summary(self) -> str:
        lines = [f"monotone: {'yes' if self.monotone else 'no'}"]
        for name, size in self.groups:
            if size == 0:
                continue
            s = self.signs[name]
            counts = {k: int(np.sum(s == k)) for k in (NONNEG, NONPOS, MIXED)}
            lines.append(f"  d/d{name}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
        return "\n".join(lines)


def check_monotone(g: ExprGraph, box_x, box_u=None, box_p=None) -> SignReport:
    """Certify Jacobian signs by interval evaluation of the symbolic Jacobian."""
    boxes = _xup_boxes(g, box_x, box_u, box_p)
    names = [n for n, s in g.groups]
    jg = differentiate(g, names)
    lo_all, hi_all = interval_eval(jg, boxes)
    lo = lo_all[jg.outputs].reshape(g.n_out, g.n_in)
    hi = hi_all[jg.outputs].reshape(g.n_out, g.n_in)
    signs, los, his = {}, {}, {}
    for name, size in g.groups:
        sl = g.group_slice(name)
        l, h = lo[:, sl], hi[:, sl]
        s = np.full(l.shape, MIXED, dtype=object)
        s[h <= 0.0] = NONPOS
        s[l >= 0.0] = NONNEG
        signs[name], los[name], his[name] = s, l, h
    return SignReport(g.groups, g.n_out, signs, los, his)


# --------------------------------------------------------------------------
# decomposition functions

DECOMP_GROUPS = ("x1", "p1", "u", "x2", "p2")


@dataclass(frozen=True, eq=False)
class DecompGraph:
    """Decomposition function d(x1, p1, u, x2, p2) stored as one graph.

    The lower bound of the successor box is ``d(lo_x, lo_p, u, hi_x, hi_p)``
    and the upper bound is the same graph with the argument copies swapped.
    """

    graph: ExprGraph
    provenance: tuple[str, ...]
    n_x: int
    n_u: int
    n_p: int

    def __post_init__(self):
        want = (("x1", self.n_x), ("p1", self.n_p), ("u", self.n_u), ("x2", self.n_x), ("p2", self.n_p))
        if self.graph.groups != want:
            raise GraphError(f"decomposition graph groups must be {want}, got {self.graph.groups}")
        if len(self.provenance) != self.graph.n_out:
            raise GraphError("one provenance entry per output is required")

    @property
    def n_out(self) -> int:
        return self.graph.n_out

    def evaluate(self, x1, p1, u, x2, p2) -> np.ndarray:
        return self.graph.evaluate(x1, p1, u, x2, p2)

    __call__ = evaluate

    def lower(self, box_x: Hyperrect, u, box_p: Hyperrect) -> np.ndarray:
        return self.graph.evaluate(box_x.lo, box_p.lo, u, box_x.hi, box_p.hi)

    def upper(self, box_x: Hyperrect, u, box_p: Hyperrect) -> np.ndarray:
        return self.graph.evaluate(box_x.hi, box_p.hi, u, box_x.lo, box_p.lo)

    def ignores_second_copy(self) -> bool:
        """True when no node reads an ``x2``/``p2`` symbol."""
        g = self.graph
        start = self.n_x + self.n_p + self.n_u
        ins = g.a[g.op == INPUT]
        return bool(np.all(ins < start))

    def to_dict(self) -> dict:
        return {
            "format": DECOMP_FORMAT,
            "version": FORMAT_VERSION,
            "n_x": self.n_x,
            "n_u": self.n_u,
            "n_p": self.n_p,
            "provenance": list(self.provenance),
            "graph": self.graph.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DecompGraph":
        if d.get("format") != DECOMP_FORMAT:
            raise GraphError(f"not a decomposition document (format={d.get('format')!r})")
        if d.get("version") != FORMAT_VERSION:
            raise GraphError(f"unsupported decomposition format version {d.get('version')!r}")
        return cls(ExprGraph.from_dict(d["graph"]), tuple(d["provenance"]),
                   int(d["n_x"]), int(d["n_u"]), int(d["n_p"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DecompGraph":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_graph(cls, graph: ExprGraph, provenance: str = "manual") -> "DecompGraph":
        """Wrap a hand-written graph over (x1, p1, u, x2, p2)."""
        sizes = dict(graph.groups)
        return cls(graph, (provenance,) * graph.n_out, sizes.get("x1", 0), sizes.get("u", 0),
                   sizes.get("p1", 0))


def linear_split(A) -> tuple[np.ndarray, np.ndarray]:
    """Positive and negative parts with ``A = A_plus + A_minus``."""
    A = np.asarray(A, dtype=float)
    return np.maximum(A, 0.0), np.minimum(A, 0.0)


def _sign_of(lo: float, hi: float) -> int:
    if lo >= 0.0:
        return 1
    if hi <= 0.0:
        return -1
    return 0


def synth_decomposition(g: ExprGraph, box_x, box_u=None, box_p=None, *,
                        use_monotone_rows: bool = True) -> DecompGraph:
    """Synthesize a decomposition function for ``g(x, u, p)`` valid on the boxes.

    Each node gets a lower expression L and an upper expression U over the
    doubled arguments; the graph stores the L expressions of the outputs.
    Product and quotient rules pick argument copies from the certified signs
    of the factors.  Rows whose sensitivities are all nonnegative reduce to
    ``f(x1, u, p1)``.
    """
    for name, _ in g.groups:
        if name not in ("x", "u", "p"):
            raise GraphError(f"dynamics graphs use groups x, u, p; got {name!r}")
    boxes = _xup_boxes(g, box_x, box_u, box_p)
    n_x, n_u, n_p = g.group_size("x"), g.group_size("u"), g.group_size("p")
    ilo, ihi = interval_eval(g, boxes)

    b = GraphBuilder()
    X1, P1 = b.symbols("x1", n_x), b.symbols("p1", n_p)
    U = b.symbols("u", n_u)
    X2, P2 = b.symbols("x2", n_x), b.symbols("p2", n_p)

    def box_text():
        return (f"box_x={boxes['x']!r}, box_u={boxes['u']!r}, box_p={boxes['p']!r}")

    def fail(node, parent):
        raise DecompositionError(
            f"factor {g.node_label(node)} of {g.node_label(parent)} has no certified sign: "
            f"it ranges over [{ilo[node]:.6g}, {ihi[node]:.6g}] on {box_text()}",
            node, (float(ilo[node]), float(ihi[node])))

    n = g.n_nodes
    L: list = [None] * n
    H: list = [None] * n
    dep = np.zeros(n, dtype=bool)
    xs = g.group_slice("x") if n_x else slice(0, 0)
    ps = g.group_slice("p") if n_p else slice(0, 0)
    _x_off, _p_off, _u_off = xs.start, ps.start, (g.group_slice("u").start if n_u else 0)
    for i in range(n):
        o = int(g.op[i])
        ia, ib, sgn = int(g.a[i]), int(g.b[i]), int(g.sgn[i])
        if o == CONST:
            L[i] = H[i] = b.const(g.val[i])
            continue
        if o == INPUT:
            name, k = g.symbol_of(ia)
            if name == "x":
                L[i], H[i], dep[i] = X1[k], X2[k], True
            elif name == "p":
                L[i], H[i], dep[i] = P1[k], P2[k], True
            else:
                L[i] = H[i] = U[k]
            continue
        da = dep[ia]
        db = dep[ib] if o in _BINARY else False
        dep[i] = da or db
        La, Ha = L[ia], H[ia]
        if o in _BINARY:
            Lb, Hb = L[ib], H[ib]
        if not dep[i]:
            if o in _BINARY:
                L[i] = H[i] = b.op(o, La, Lb, sgn=sgn)
            else:
                L[i] = H[i] = b.op(o, La, val=float(g.val[i]), sgn=sgn)
            continue
        if o == ADD:
            L[i], H[i] = La + Lb, Ha + Hb
        elif o == SUB:
            L[i], H[i] = La - Hb, Ha - Lb
        elif o == NEG:
            L[i], H[i] = -Ha, -La
        elif o == MUL:
            sa, sb = _sign_of(ilo[ia], ihi[ia]), _sign_of(ilo[ib], ihi[ib])
            if not da:
                if sa == 0:
                    fail(ia, i)
                L[i], H[i] = (La * Lb, La * Hb) if sa > 0 else (La * Hb, La * Lb)
            elif not db:
                if sb == 0:
                    fail(ib, i)
                L[i], H[i] = (La * Lb, Ha * Lb) if sb > 0 else (Ha * Lb, La * Lb)
            else:
                if sa == 0:
                    fail(ia, i)
                if sb == 0:
                    fail(ib, i)
                if sa > 0 and sb > 0:
                    L[i], H[i] = La * Lb, Ha * Hb
                elif sa > 0:
                    L[i], H[i] = Ha * Lb, La * Hb
                elif sb > 0:
                    L[i], H[i] = La * Hb, Ha * Lb
                else:
                    L[i], H[i] = Ha * Hb, La * Lb
        elif o == DIV:
            sa, sb = _sign_of(ilo[ia], ihi[ia]), _sign_of(ilo[ib], ihi[ib])
            if not db:
                L[i], H[i] = ((div(La, Lb, sgn), div(Ha, Lb, sgn)) if sb > 0
                              else (div(Ha, Lb, sgn), div(La, Lb, sgn)))
            elif not da:
                if sa == 0:
                    fail(ia, i)
                L[i], H[i] = ((div(La, Hb, sgn), div(La, Lb, sgn)) if sa > 0
                              else (div(La, Lb, sgn), div(La, Hb, sgn)))
            else:
                if sa == 0:
                    fail(ia, i)
                if sa > 0 and sb > 0:
                    L[i], H[i] = div(La, Hb, sgn), div(Ha, Lb, sgn)
                elif sa > 0:
                    L[i], H[i] = div(Ha, Hb, sgn), div(La, Lb, sgn)
                elif sb > 0:
                    L[i], H[i] = div(La, Lb, sgn), div(Ha, Hb, sgn)
                else:
                    L[i], H[i] = div(Ha, Lb, sgn), div(La, Hb, sgn)
        elif o == EXP:
            L[i], H[i] = exp(La), exp(Ha)
        elif o == POW:
            k = int(g.val[i])
            if k % 2 == 1:
                L[i], H[i] = power(La, k, sgn), power(Ha, k, sgn)
            else:
                sa = _sign_of(ilo[ia], ihi[ia])
                if sa == 0:
                    fail(ia, i)
                L[i], H[i] = ((power(La, k, sgn), power(Ha, k, sgn)) if sa > 0
                              else (power(Ha, k, sgn), power(La, k, sgn)))
        elif o == MIN:
            L[i], H[i] = minimum(La, Lb), minimum(Ha, Hb)
        else:
            L[i], H[i] = maximum(La, Lb), maximum(Ha, Hb)

    report = None
    if use_monotone_rows:
        try:
            report = check_monotone(g, boxes["x"], boxes["u"], boxes["p"])
        except GraphError:
            report = None  # min/max nodes: no symbolic Jacobian
    first = second = None
    outs, prov = [], []
    for r, j in enumerate(g.outputs):
        j = int(j)
        if report is not None and report.row_monotone(r):
            if first is None:
                first = g.apply(b, {"x": X1, "u": U, "p": P1})
            outs.append(first[r])
            prov.append("monotone")
        elif report is not None and report.row_antitone(r):
            if second is None:
                second = g.apply(b, {"x": X2, "u": U, "p": P2})
            outs.append(second[r])
            prov.append("antitone")
        else:
            outs.append(L[j])
            prov.append("rewrite:" + OP_NAMES[int(g.op[j])] if dep[j] else "input-only")
    graph = b.graph(outs, (("x1", n_x), ("p1", n_p), ("u", n_u), ("x2", n_x), ("p2", n_p)))
    return DecompGraph(graph, tuple(prov), n_x, n_u, n_p)


def tight_decomposition_oracle(g: ExprGraph, u, first, second, grid_pts: int = 11,
                               max_points: int = 10 ** 6) -> np.ndarray:
    """Grid extremum of each output over the box spanned by two (x, p) tuples.

    ``first <= second`` gives the minimum, ``first >= second`` the maximum.
    The grid optimum is an inner approximation of the exact extremum.
    """
    n_x, n_p = g.group_size("x"), g.group_size("p")
    first = np.asarray(first, dtype=float).reshape(-1)
    second = np.asarray(second, dtype=float).reshape(-1)
    if first.size != n_x + n_p or second.size != n_x + n_p:
        raise GraphError("argument tuples must stack (x, p)")
    if grid_pts < 2:
        raise ValueError("grid_pts must be >= 2")
    if np.all(first <= second):
        lo, hi, sense = first, second, 1.0
    elif np.all(first >= second):
        lo, hi, sense = second, first, -1.0
    else:
        raise OrderingError("argument tuples are neither ordered <= nor >=")
    axes = [np.linspace(l, h, grid_pts) if h > l else np.array([l]) for l, h in zip(lo, hi)]
    total = int(np.prod([len(ax) for ax in axes])) if axes else 1
    if total > max_points:
        raise CapacityError(f"grid of {total} points exceeds the cap of {max_points}")
    mesh = np.meshgrid(*axes, indexing="ij") if axes else []
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1) if axes else np.zeros((1, 0))
    u = np.asarray(u, dtype=float).reshape(-1)
    Y = g.evaluate(x=pts[:, :n_x], u=np.broadcast_to(u, (pts.shape[0], u.size)), p=pts[:, n_x:])
    return Y.min(axis=0) if sense > 0 else Y.max(axis=0)
