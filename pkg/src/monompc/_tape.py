"""Compiled kernels that interpret an expression graph stored as flat arrays.

A graph is a topologically ordered tape.  Node ``i`` has an opcode, two child
indices ``a``/``b`` (``-1`` when unused), a float payload (constant value or
power exponent) and a sign code used for domain checks.  Input nodes keep the
flat input index in ``a``.
"""

import numpy as np
from numba import njit

CONST, INPUT, ADD, SUB, NEG, MUL, DIV, EXP, POW, MIN, MAX = range(11)

OP_NAMES = ("const", "symbol", "add", "sub", "neg", "mul", "div", "exp", "pow", "min2", "max2")


@njit(cache=True)
def _ipow(x, n):
    r = 1.0
    for _ in range(n):
        r *= x
    return r


@njit(cache=True)
def _forward(op, a, b, val, sgn, x, v):
    """Fill ``v`` with node values; return the index of a failing node or -1."""
    n = op.shape[0]
    for i in range(n):
        o = op[i]
        if o == CONST:
            v[i] = val[i]
        elif o == INPUT:
            v[i] = x[a[i]]
        elif o == ADD:
            v[i] = v[a[i]] + v[b[i]]
        elif o == SUB:
            v[i] = v[a[i]] - v[b[i]]
        elif o == NEG:
            v[i] = -v[a[i]]
        elif o == MUL:
            v[i] = v[a[i]] * v[b[i]]
        elif o == DIV:
            d = v[b[i]]
            s = sgn[i]
            if d == 0.0 or (s == 1 and not d > 0.0) or (s == -1 and not d < 0.0):
                return i
            v[i] = v[a[i]] / d
        elif o == EXP:
            v[i] = np.exp(v[a[i]])
        elif o == POW:
            base = v[a[i]]
            s = sgn[i]
            if (s == 1 and base < 0.0) or (s == -1 and base > 0.0):
                return i
            v[i] = _ipow(base, int(val[i]))
        elif o == MIN:
            v[i] = min(v[a[i]], v[b[i]])
        else:
            v[i] = max(v[a[i]], v[b[i]])
    return -1


@njit(cache=True)
def eval_batch(op, a, b, val, sgn, outs, X):
    """Evaluate outputs for every row of ``X``; returns (Y, bad_node, bad_row)."""
    nb = X.shape[0]
    Y = np.empty((nb, outs.shape[0]))
    v = np.empty(op.shape[0])
    for r in range(nb):
        bad = _forward(op, a, b, val, sgn, X[r], v)
        if bad >= 0:
            return Y, bad, r
        for j in range(outs.shape[0]):
            Y[r, j] = v[outs[j]]
    return Y, -1, -1


@njit(cache=True)
def _reverse(op, a, b, val, v, root, adj, grad):
    for i in range(root + 1):
        adj[i] = 0.0
    adj[root] = 1.0
    for i in range(root, -1, -1):
        w = adj[i]
        if w == 0.0:
            continue
        o = op[i]
        if o == INPUT:
            grad[a[i]] += w
        elif o == ADD:
            adj[a[i]] += w
            adj[b[i]] += w
        elif o == SUB:
            adj[a[i]] += w
            adj[b[i]] -= w
        elif o == NEG:
            adj[a[i]] -= w
        elif o == MUL:
            adj[a[i]] += w * v[b[i]]
            adj[b[i]] += w * v[a[i]]
        elif o == DIV:
            d = v[b[i]]
            adj[a[i]] += w / d
            adj[b[i]] -= w * v[i] / d
        elif o == EXP:
            adj[a[i]] += w * v[i]
        elif o == POW:
            k = int(val[i])
            adj[a[i]] += w * k * _ipow(v[a[i]], k - 1)
        elif o == MIN:
            if v[a[i]] <= v[b[i]]:
                adj[a[i]] += w
            else:
                adj[b[i]] += w
        elif o == MAX:
            if v[a[i]] >= v[b[i]]:
                adj[a[i]] += w
            else:
                adj[b[i]] += w


@njit(cache=True)
def jac_batch(op, a, b, val, sgn, outs, X):
    """Values and dense Jacobians (rows x outputs x inputs) by reverse sweeps."""
    nb = X.shape[0]
    nin = X.shape[1]
    nout = outs.shape[0]
    Y = np.empty((nb, nout))
    J = np.zeros((nb, nout, nin))
    v = np.empty(op.shape[0])
    adj = np.empty(op.shape[0])
    for r in range(nb):
        bad = _forward(op, a, b, val, sgn, X[r], v)
        if bad >= 0:
            return Y, J, bad, r
        for j in range(nout):
            Y[r, j] = v[outs[j]]
            _reverse(op, a, b, val, v, outs[j], adj, J[r, j])
    return Y, J, -1, -1
