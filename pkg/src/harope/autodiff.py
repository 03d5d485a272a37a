"""Reverse-mode automatic differentiation over a fixed set of array primitives.

A :class:`Tape` records every primitive applied to its :class:`Var` values in
execution order. ``Tape.backward`` walks that list once in reverse, so the
recorded order is already topological. Values are float64 numpy arrays with
ordinary broadcasting; gradients are reduced back to each input's shape.

The matrix exponential is differentiated by recording its truncated Taylor
construction (scale, Horner matmuls, squarings) as ordinary primitives.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from harope import DomainError, ShapeError
from harope import numerics as nx


class Var:
    __slots__ = ("tape", "value", "index", "parents", "vjp", "name", "requires")
    __array_ufunc__ = None  # make ndarray <op> Var defer to Var's reflected operators

    def __init__(self, tape, value, parents=(), vjp=None, name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name
        # constants and anything computed only from constants need no gradient
        self.requires = any(p.requires for p in parents) if parents else name != "const"
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return self.vjp is None

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape}{', ' + self.name if self.name else ''})"


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []

    def leaf(self, value, name=None) -> Var:
        return Var(self, np.array(value, dtype=np.float64), name=name)

    def const(self, value) -> Var:
        return self.leaf(value, name="const")

    def backward(self, loss: Var, leaves=None) -> dict:
        """Gradients of scalar ``loss`` for the requested leaves (default: all named leaves).

        Returns a dict keyed by Var. Leaves that the loss does not reach get zeros.
        """
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        if loss.value.size != 1:
            raise DomainError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for node in reversed(self.nodes[:loss.index + 1]):
            g = grads[node.index]
            if g is None or node.vjp is None or not node.requires:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires:
                    continue
                pg = _unbroadcast(pg, parent.value.shape)
                cur = grads[parent.index]
                grads[parent.index] = pg if cur is None else cur + pg
        if leaves is None:
            leaves = [n for n in self.nodes if n.is_leaf and n.name not in (None, "const")]
        return {v: (grads[v.index] if grads[v.index] is not None else np.zeros_like(v.value))
                for v in leaves}


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def lift(x, tape: Tape | None = None) -> Var:
    if isinstance(x, Var):
        return x
    return (tape or _tape_of(x)).const(x)


def _binary(a, b):
    t = _tape_of(a, b)
    return lift(a, t), lift(b, t), t


# ---------------------------------------------------------------- primitives

def add(a, b) -> Var:
    a, b, t = _binary(a, b)
    return Var(t, a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Var:
    a, b, t = _binary(a, b)
    return Var(t, a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Var:
    """Elementwise product with broadcasting."""
    a, b, t = _binary(a, b)
    av, bv = a.value, b.value
    return Var(t, av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return Var(a.tape, a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Var:
    """Batched matrix product over the last two axes (numpy ``@`` semantics, ndim >= 2)."""
    a, b, t = _binary(a, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError("matmul operands need ndim >= 2")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"cannot multiply {av.shape} by {bv.shape}")

    def vjp(g):
        ga = _mm_grad(g, bv, a.value.shape, transpose_other=True) if a.requires else None
        gb = _mm_grad(av, g, b.value.shape, transpose_other=False) if b.requires else None
        return ga, gb

    return Var(t, _mm(av, bv), (a, b), vjp)


def _fold(x: np.ndarray, extra: int) -> np.ndarray:
    """Move the first ``extra`` axes next to the row axis and merge them into it."""
    x = np.moveaxis(x, tuple(range(extra)), tuple(range(x.ndim - 2 - extra, x.ndim - 2)))
    return x.reshape(x.shape[:x.ndim - 2 - extra] + (-1, x.shape[-1]))


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``x @ y``, flattening x's batch axes into one BLAS call when y is a plain matrix."""
    if y.ndim == 2 and x.ndim > 2:
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[-1],))
    return x @ y


def _mm_grad(x: np.ndarray, y: np.ndarray, shape, transpose_other: bool) -> np.ndarray:
    """Gradient of one matmul operand, summing broadcast batch axes inside BLAS where possible.

    For the left operand: g @ b^T (``x=g``, ``y=b``); for the right: a^T @ g (``x=a``, ``y=g``).
    """
    if transpose_other:
        return _mm(x, np.swapaxes(y, -1, -2))
    extra = x.ndim - len(shape)
    if extra > 0 and x.shape[extra:-2] == tuple(shape[:-2]) and y.shape[:extra] == x.shape[:extra]:
        xf, yf = _fold(x, extra), _fold(y, extra)
        return np.swapaxes(xf, -1, -2) @ yf
    return np.swapaxes(x, -1, -2) @ y


def dot(a, b) -> Var:
    """Inner product over the last axis."""
    a, b, t = _binary(a, b)
    av, bv = a.value, b.value
    return Var(t, np.sum(av * bv, axis=-1), (a, b),
               lambda g: (g[..., None] * bv, g[..., None] * av))


def transpose(a: Var, axes=None) -> Var:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = tuple(range(a.value.ndim - 2)) + (a.value.ndim - 1, a.value.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Var(a.tape, np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return Var(a.tape, a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum(a: Var, axis=None, keepdims=False) -> Var:  # noqa: A001
    shape = a.value.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Var(a.tape, np.asarray(out), (a,), vjp)


def mean(a: Var, axis=None, keepdims=False) -> Var:
    n = a.value.size if axis is None else np.prod([a.value.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis, keepdims), 1.0 / float(n))


def softplus(a: Var) -> Var:
    x = a.value
    return Var(a.tape, nx.softplus(x), (a,), lambda g: (g * nx.sigmoid(x),))


def take(a: Var, idx) -> Var:
    """Gather rows (first axis) with an integer index array."""
    idx = np.asarray(idx)
    shape = a.value.shape
    unique = idx.ndim == 0 or np.unique(idx).size == idx.size

    def vjp(g):
        out = np.zeros(shape)
        if unique:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Var(a.tape, a.value[idx], (a,), vjp)


def rotary(a: Var, cos: np.ndarray, sin: np.ndarray) -> Var:
    """Rotate adjacent feature pairs of ``a`` by fixed angles (cos/sin have half the last width).

    Each pair (x0, x1) is treated as the complex number x0 + i x1 and
    multiplied by cos + i sin.
    """
    phase = cos + 1j * sin

    def turn(x, ph):
        z = np.ascontiguousarray(x).view(np.complex128) * ph
        return z.view(np.float64)

    return Var(a.tape, turn(a.value, phase), (a,), lambda g: (turn(g, phase.conj()),))


def skew(p: Var, dim: int) -> Var:
    """Skew-symmetric matrices from packed strict-upper-triangle entries (..., dim(dim-1)/2)."""
    iu = np.triu_indices(dim, k=1)
    if p.value.shape[-1] != len(iu[0]):
        raise ShapeError(f"dim {dim} needs {len(iu[0])} entries, got {p.value.shape[-1]}")
    s = np.zeros(p.value.shape[:-1] + (dim, dim))
    s[..., iu[0], iu[1]] = p.value
    s = s - np.swapaxes(s, -1, -2)

    def vjp(g):
        return (g[..., iu[0], iu[1]] - g[..., iu[1], iu[0]],)

    return Var(p.tape, s, (p,), vjp)


def concat(xs, axis=0) -> Var:
    xs = list(xs)
    t = _tape_of(*xs)
    xs = [lift(x, t) for x in xs]
    sizes = np.cumsum([x.value.shape[axis] for x in xs])[:-1]
    return Var(t, np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
               lambda g: tuple(np.split(g, sizes, axis=axis)))


def softmax(a: Var, axis=-1) -> Var:
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return Var(a.tape, y, (a,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def cross_entropy(logits: Var, labels) -> Var:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits) over the last axis."""
    labels = np.asarray(labels)
    x = logits.value
    if x.shape[:-1] != labels.shape:
        raise ShapeError(f"logits {x.shape} do not match labels {labels.shape}")
    m = x.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(x - m).sum(axis=-1))
    picked = np.take_along_axis(x, labels[..., None], axis=-1)[..., 0]
    n = labels.size

    def vjp(g):
        p = np.exp(x - lse[..., None])
        np.put_along_axis(p, labels[..., None], np.take_along_axis(p, labels[..., None], -1) - 1.0, -1)
        return (p * (g / n),)

    return Var(logits.tape, np.asarray(np.mean(lse - picked)), (logits,), vjp)


def horner_step(x: Var, p: Var, c: float) -> Var:
    """I + c * (x @ p) for (batches of) square matrices."""
    xv, pv = x.value, p.value
    out = c * (xv @ pv)
    out += np.eye(xv.shape[-1])

    def vjp(g):
        return (c * (g @ np.swapaxes(pv, -1, -2)) if x.requires else None,
                c * (np.swapaxes(xv, -1, -2) @ g) if p.requires else None)

    return Var(x.tape, out, (x, p), vjp)


def expm(m: Var) -> Var:
    """Matrix exponential of a (batch of) square matrices, recorded as Taylor + squaring.

    The scaling power is chosen from the current value and treated as a constant.
    Same algorithm as :func:`harope.numerics.expm`.
    """
    n = m.value.shape[-1]
    # one power for the whole batch
    s = max(nx.scaling_power(b) for b in m.value.reshape(-1, n, n))
    x = scale(m, 2.0 ** -s)
    p = add(scale(x, 1.0 / nx.TAYLOR_ORDER), np.eye(n))
    for j in range(nx.TAYLOR_ORDER - 1, 0, -1):
        p = horner_step(x, p, 1.0 / j)
    for _ in range(s):
        p = matmul(p, p)
    return p


# ---------------------------------------------------------------- gradient checking

class NumericError(ArithmeticError):
    def __init__(self, msg, index):
        super().__init__(f"{msg} (parameter index {index})")
        self.index = index


@dataclass
class GradReport:
    """Analytic vs central-difference gradients, grouped by parameter name."""

    analytic: dict[str, np.ndarray] = field(default_factory=dict)
    numeric: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def rel_err(a, n) -> np.ndarray:
        a, n = np.asarray(a), np.asarray(n)
        return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)

    @property
    def max_rel_err(self) -> dict[str, float]:
        return {k: float(np.max(self.rel_err(self.analytic[k], self.numeric[k]), initial=0.0))
                for k in self.analytic}

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["param_group", "index", "analytic", "numeric", "rel_err"])
        for k in self.analytic:
            a, n = np.ravel(self.analytic[k]), np.ravel(self.numeric[k])
            for i, e in enumerate(self.rel_err(a, n)):
                w.writerow([k, i, nx.format_float(a[i]), nx.format_float(n[i]), nx.format_float(e)])
        return buf.getvalue()


def grad_check(f: Callable[[Tape, dict], Var], params: dict[str, np.ndarray], h: float = 1e-5,
               indices: dict[str, np.ndarray] | None = None) -> GradReport:
    """Compare backward() with central differences (f(p+h e_i) - f(p-h e_i)) / 2h.

    ``f(tape, leaves)`` builds a scalar loss from a dict of leaf Vars. ``indices``
    optionally restricts each group's finite-difference probes to flat indices.
    """
    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    loss = f(tape, leaves)
    g = tape.backward(loss, list(leaves.values()))

    def value(ps):
        t = Tape()
        return float(f(t, {k: t.leaf(v, name=k) for k, v in ps.items()}).value)

    report = GradReport()
    for k, p0 in params.items():
        p0 = np.asarray(p0, dtype=np.float64)
        idx = np.arange(p0.size) if indices is None or k not in indices else np.asarray(indices[k])
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            vals = []
            for sgn in (1.0, -1.0):
                p = p0.copy().ravel()
                p[i] += sgn * h
                ps = dict(params)
                ps[k] = p.reshape(p0.shape)
                v = value(ps)
                if not np.isfinite(v):
                    raise NumericError(f"non-finite loss for group {k!r}", int(i))
                vals.append(v)
            num[j] = (vals[0] - vals[1]) / (2 * h)
        report.analytic[k] = np.ravel(g[leaves[k]])[idx]
        report.numeric[k] = num
    return report
