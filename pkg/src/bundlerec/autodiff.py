"""Minimal reverse-mode differentiation over numpy arrays.

Every op in this module is polymorphic: given plain ndarrays it computes
plain ndarrays (the fast inference path), given at least one ``Var`` it
records a node on that Var's tape so gradients can later be pushed back
with ``Tape.backward``. The op set is exactly what the propagation model
and the ranking loss need; nothing speculative.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "value_of",
    "tape_of",
    "accumulate",
    "make_op",
    "add",
    "sub",
    "scale",
    "mul_rows",
    "linear",
    "leaky_relu",
    "relu",
    "take_rows",
    "scatter_rows",
    "concat_cols",
    "sum_sq",
    "neg_log_sigmoid",
    "sigmoid",
]


class Var:
    """An array-valued node of the computation graph."""

    __slots__ = ("value", "grad", "_tape", "_back")

    def __init__(self, value, tape=None, back=None):
        self.value = value
        self.grad = None
        self._tape = tape
        self._back = back
        if tape is not None:
            tape.nodes.append(self)


class Tape:
    """Records Vars in creation order; creation order is a topological order."""

    def __init__(self) -> None:
        self.nodes: list[Var] = []

    def leaf(self, value: np.ndarray) -> Var:
        return Var(np.asarray(value, dtype=np.float64), tape=self)

    def backward(self, root: Var, seed: np.ndarray | None = None) -> None:
        if seed is None:
            seed = np.ones_like(root.value)
        root.grad = seed
        for node in reversed(self.nodes):
            if node.grad is not None and node._back is not None:
                node._back(node.grad)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x._tape
    return None


def accumulate(var: Var, g: np.ndarray) -> None:
    """Add a gradient contribution to a node (used by fused custom ops too)."""
    # Accumulation never mutates in place, so sharing g with a child is safe.
    var.grad = g if var.grad is None else var.grad + g


_accum = accumulate


def make_op(out_value, tape: Tape | None, back):
    """Escape hatch for fused ops: wrap a computed value and its backward.

    Returns the bare value when no tape is active, mirroring the built-in
    ops' dual behavior.
    """
    if tape is None:
        return out_value
    return Var(out_value, tape, back)


def tape_of(*xs) -> Tape | None:
    return _tape_of(*xs)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Sum the gradient of a broadcast result back down to the operand's shape.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    out = value_of(a) + value_of(b)
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def back(g):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g, np.shape(a.value)))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(g, np.shape(b.value)))

    return Var(out, tape, back)


def sub(a, b):
    out = value_of(a) - value_of(b)
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def back(g):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g, np.shape(a.value)))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(-g, np.shape(b.value)))

    return Var(out, tape, back)


def scale(a, c: float):
    """Multiply by a python scalar constant."""
    out = value_of(a) * c
    tape = _tape_of(a)
    if tape is None:
        return out

    def back(g):
        _accum(a, g * c)

    return Var(out, tape, back)


def mul_rows(a, s: np.ndarray):
    """Scale row i of ``a`` by the constant s[i]; s carries no gradient."""
    col = s[:, None]
    out = value_of(a) * col
    tape = _tape_of(a)
    if tape is None:
        return out

    def back(g):
        _accum(a, g * col)

    return Var(out, tape, back)


def linear(x, w, b=None):
    """x @ w.T (+ b). Gradients flow to x, w and b."""
    xv, wv = value_of(x), value_of(w)
    out = xv @ wv.T
    if b is not None:
        out = out + value_of(b)
    tape = _tape_of(x, w, b)
    if tape is None:
        return out

    def back(g):
        if isinstance(x, Var):
            _accum(x, g @ wv)
        if isinstance(w, Var):
            _accum(w, g.T @ xv)
        if b is not None and isinstance(b, Var):
            _accum(b, _unbroadcast(g, np.shape(b.value)))

    return Var(out, tape, back)


def leaky_relu(x, slope: float):
    xv = value_of(x)
    out = np.where(xv > 0, xv, slope * xv)
    tape = _tape_of(x)
    if tape is None:
        return out
    factor = np.where(xv > 0, 1.0, slope)

    def back(g):
        _accum(x, g * factor)

    return Var(out, tape, back)


def relu(x):
    xv = value_of(x)
    out = np.maximum(xv, 0.0)
    tape = _tape_of(x)
    if tape is None:
        return out
    mask = xv > 0

    def back(g):
        _accum(x, g * mask)

    return Var(out, tape, back)


def take_rows(x, idx: np.ndarray):
    xv = value_of(x)
    out = xv[idx]
    tape = _tape_of(x)
    if tape is None:
        return out

    def back(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    return Var(out, tape, back)


def scatter_rows(x, idx: np.ndarray, n: int):
    """Sum rows of ``x`` into an (n, d) array at positions ``idx``."""
    xv = value_of(x)
    out = np.zeros((n, xv.shape[1]), dtype=xv.dtype)
    np.add.at(out, idx, xv)
    tape = _tape_of(x)
    if tape is None:
        return out

    def back(g):
        _accum(x, g[idx])

    return Var(out, tape, back)


def concat_cols(parts):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=1)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    widths = [v.shape[1] for v in values]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def back(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(part, Var):
                _accum(part, g[:, lo:hi])

    return Var(out, tape, back)


def sum_sq(x):
    """Sum of squared entries; the L2 building block of the ranking loss."""
    xv = value_of(x)
    out = np.float64((xv * xv).sum())
    tape = _tape_of(x)
    if tape is None:
        return out

    def back(g):
        _accum(x, (2.0 * float(g)) * xv)

    return Var(out, tape, back)


def sigmoid(x):
    """Numerically stable logistic; value-only (no tape node needed so far)."""
    xv = np.asarray(value_of(x), dtype=np.float64)
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def neg_log_sigmoid(x):
    """-log(sigmoid(x)) computed as softplus(-x); stable for any magnitude."""
    xv = value_of(x)
    out = np.logaddexp(0.0, -xv)
    tape = _tape_of(x)
    if tape is None:
        return out

    def back(g):
        _accum(x, g * (sigmoid(xv) - 1.0))

    return Var(out, tape, back)
