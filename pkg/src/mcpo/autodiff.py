"""Tape-based reverse-mode differentiation over a small fixed op set.

Every op accepts plain ``numpy`` arrays or :class:`Var` values. When no input
is a ``Var`` the op is evaluated directly and returns an array, so the same
network code serves both the differentiable and the plain evaluation path.

    >>> g = grad(lambda x: ad_sum(square(x)) * 0.5, np.array([1.0, -2.0]))
    >>> g
    array([ 1., -2.])
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError

__all__ = [
    "Tape", "Var", "grad", "value_and_grad",
    "add", "sub", "mul", "div", "neg", "matmul", "tanh", "relu", "exp", "log",
    "square", "ad_sum", "mean", "minimum", "clip", "log_softmax",
    "gaussian_logprob", "dropout", "take", "reshape", "value_of",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


class Tape:
    """Records ops in execution order; :meth:`gradient` replays them backwards.

    A tape is owned by one thread while recording.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Var, tuple, Callable, str]] = []

    def var(self, value) -> "Var":
        return Var(np.asarray(value, dtype=np.float64), self)

    def gradient(self, output: "Var", wrt: "Var") -> np.ndarray:
        if output.tape is not self or np.ndim(output.value) != 0:
            raise ValueError("gradient needs a scalar output recorded on this tape")
        for node in self.nodes:
            node[0].grad = None
        wrt.grad = None
        output.grad = np.ones(())
        for out, parents, backward, name in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            parent_grads = backward(g)
            for p, pg in zip(parents, parent_grads):
                if pg is None or not isinstance(p, Var) or p.tape is not self:
                    continue
                pg = _unbroadcast(pg, p.value.shape)
                p.grad = pg if p.grad is None else p.grad + pg
        if wrt.grad is None:
            return np.zeros_like(wrt.value)
        return np.array(wrt.grad, dtype=np.float64, copy=True)


class Var:
    __slots__ = ("value", "tape", "grad")
    __array_priority__ = 100.0

    def __init__(self, value: np.ndarray, tape: Tape):
        self.value = value
        self.tape = tape
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def __repr__(self) -> str:
        return f"Var({self.value!r})"


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


def _tape_of(args: Sequence) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _record(name: str, value, parents: tuple, backward: Callable):
    tape = _tape_of(parents)
    if tape is None:
        return value
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NumericalError(name)
    out = Var(value, tape)
    tape.nodes.append((out, parents, backward, name))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# --- elementwise arithmetic -------------------------------------------------

def add(a, b):
    return _record("add", value_of(a) + value_of(b), (a, b), lambda g: (g, g))


def sub(a, b):
    return _record("sub", value_of(a) - value_of(b), (a, b), lambda g: (g, -g))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    return _record("div", av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def neg(a):
    return _record("neg", -value_of(a), (a,), lambda g: (-g,))


def square(a):
    av = value_of(a)
    return _record("square", av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a):
    out = np.exp(value_of(a))
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def tanh(a):
    out = np.tanh(value_of(a))
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    av = value_of(a)
    pos = av > 0
    return _record("relu", np.where(pos, av, 0.0), (a,), lambda g: (g * pos,))


def minimum(a, b):
    av, bv = value_of(a), value_of(b)
    pick_a = av <= bv
    return _record("min", np.where(pick_a, av, bv), (a, b),
                   lambda g: (g * pick_a, g * ~pick_a))


def clip(a, lo: float, hi: float):
    av = value_of(a)
    inside = (av >= lo) & (av <= hi)
    return _record("clip", np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def dropout(a, mask: np.ndarray):
    """Multiply by a fixed (already rescaled) dropout mask."""
    return _record("dropout", value_of(a) * mask, (a,), lambda g: (g * mask,))


# --- linear algebra and reductions ------------------------------------------

def matmul(a, b):
    av, bv = value_of(a), value_of(b)

    def backward(g):
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _record("matmul", av @ bv, (a, b), backward)


def ad_sum(a, axis=None):
    av = value_of(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape),)

    return _record("sum", av.sum(axis=axis), (a,), backward)


def mean(a, axis=None):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / n, av.shape),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), av.shape),)

    return _record("mean", av.mean(axis=axis), (a,), backward)


def take(a, idx):
    av = value_of(a)

    def backward(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g) if _is_fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return _record("take", av[idx], (a,), backward)


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def reshape(a, shape):
    av = value_of(a)
    return _record("reshape", av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


# --- fused distribution ops -------------------------------------------------

def log_softmax(a, axis: int = -1):
    av = value_of(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("softmax-log", out, (a,), backward)


def gaussian_logprob(mu, log_std, action):
    """Row-wise log density of a diagonal Gaussian, summed over the last axis."""
    mv, lv, xv = value_of(mu), value_of(log_std), value_of(action)
    inv_var = np.exp(-2.0 * lv)
    diff = xv - mv
    z2 = diff * diff * inv_var
    out = -0.5 * z2.sum(axis=-1) - np.broadcast_to(lv, diff.shape).sum(axis=-1) \
        - 0.5 * diff.shape[-1] * _LOG_2PI

    def backward(g):
        ge = np.expand_dims(g, -1)
        d_mu = ge * diff * inv_var
        d_ls = ge * (z2 - 1.0)
        return d_mu, d_ls, -d_mu

    return _record("gaussian-logprob", out, (mu, log_std, action), backward)


# --- entry points -------------------------------------------------------------

def value_and_grad(loss_fn: Callable, params: np.ndarray) -> tuple[float, np.ndarray]:
    """Evaluate ``loss_fn(params)`` and its exact gradient with respect to ``params``."""
    tape = Tape()
    x = tape.var(params)
    out = loss_fn(x)
    if not isinstance(out, Var):
        # loss does not depend on params
        return float(np.asarray(out)), np.zeros_like(x.value)
    return float(out.value), tape.gradient(out, x)


def grad(loss_fn: Callable, params: np.ndarray) -> np.ndarray:
    return value_and_grad(loss_fn, params)[1]
