"""Minimal reverse-mode differentiation over numpy arrays.

Covers the vocabulary the EVE objective needs: affine maps (``einsum``),
elementwise ``exp``/``log``/``square``/``abs``, broadcasting arithmetic,
slicing, reductions and clamp-at-zero (``relu``). The subgradient of ``relu``
and ``abs`` at 0 is 0.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import NonFiniteError


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _lift(x) -> "Var":
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


class Var:
    __slots__ = ("value", "grad", "_parents", "op")

    def __init__(self, value, parents=(), op="leaf"):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced by '{op}'")
        self.value = value
        self.grad = None
        # each parent is (Var, fn mapping upstream grad -> grad for that parent)
        self._parents = parents
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    # arithmetic
    def __add__(self, other):
        other = _lift(other)
        return Var(self.value + other.value,
                   ((self, lambda g: _unbroadcast(g, self.shape)),
                    (other, lambda g: _unbroadcast(g, other.shape))), "add")

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, ((self, lambda g: -g),), "neg")

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return Var(a * b,
                   ((self, lambda g: _unbroadcast(g * b, self.shape)),
                    (other, lambda g: _unbroadcast(g * a, other.shape))), "mul")

    __rmul__ = __mul__

    def __truediv__(self, c: float):
        if isinstance(c, Var):
            raise TypeError("division is only defined by constants")
        return self * (1.0 / c)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only square is in the vocabulary")
        return square(self)

    def __getitem__(self, idx):
        def back(g, shape=self.shape):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return out

        return Var(self.value[idx], ((self, back),), "getitem")

    def reshape(self, *shape):
        old = self.shape
        return Var(self.value.reshape(*shape), ((self, lambda g: g.reshape(old)),), "reshape")

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self):
        if self.value.size != 1:
            raise ValueError("backward() needs a scalar output")
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p, _ in node._parents)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, fn in node._parents:
                g = fn(node.grad)
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError(f"non-finite gradient through '{node.op}'")
                parent.grad = g if parent.grad is None else parent.grad + g

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape})"


def exp(x: Var) -> Var:
    with np.errstate(over="ignore"):
        v = np.exp(x.value)
    return Var(v, ((x, lambda g: g * v),), "exp")


def log(x: Var) -> Var:
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.log(x.value)
    return Var(v, ((x, lambda g: g / x.value),), "log")


def square(x: Var) -> Var:
    return Var(x.value ** 2, ((x, lambda g: 2.0 * x.value * g),), "square")


def abs_(x: Var) -> Var:
    return Var(np.abs(x.value), ((x, lambda g: g * np.sign(x.value)),), "abs")


def relu(x: Var) -> Var:
    mask = (x.value > 0).astype(np.float64)
    return Var(x.value * mask, ((x, lambda g: g * mask),), "relu")


def sum_(x: Var, axis=None) -> Var:
    shape = x.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Var(x.value.sum(axis=axis), ((x, back),), "sum")


def mean(x: Var, axis=None) -> Var:
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis) * (1.0 / n)


def einsum(spec: str, a: Var, b: Var) -> Var:
    """Two-operand einsum; gradients by re-contraction."""
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    a, b = _lift(a), _lift(b)
    va, vb = a.value, b.value
    return Var(np.einsum(spec, va, vb),
               ((a, lambda g: np.einsum(f"{out},{sb}->{sa}", g, vb)),
                (b, lambda g: np.einsum(f"{out},{sa}->{sb}", g, va))), "einsum")


def grad(loss_fn: Callable, params):
    """Exact gradients of the scalar ``loss_fn(params)``.

    ``params`` is an array or a mapping of name -> array; the result has the
    same structure. ``loss_fn`` receives :class:`Var` leaves.
    """
    if isinstance(params, Mapping):
        leaves = {k: Var(np.array(v, dtype=np.float64)) for k, v in params.items()}
        out = _lift(loss_fn(leaves))
        out.backward()
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
                for k, v in leaves.items()}
    leaf = Var(np.array(params, dtype=np.float64))
    out = _lift(loss_fn(leaf))
    out.backward()
    return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
