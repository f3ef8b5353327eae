"""Minimal reverse-mode differentiation over numpy arrays.

Every op takes numpy arrays or :class:`Var` handles.  When no input is a
``Var`` the op is a plain numpy computation; otherwise the result is
recorded on the inputs' tape together with a vector-Jacobian product.
Parameters enter the tape as slices of one flat vector, and
:func:`backward` returns the gradient in that flat layout.
"""
from __future__ import annotations

import math

import numpy as np


class UsageError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


class Var:
    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"


class Tape:
    def __init__(self, n_params: int = 0):
        self.n_params = n_params
        self.values: list[np.ndarray] = []
        self.parents: list[tuple] = []
        self.vjps: list = []
        self.param_slots: dict[int, tuple[int, tuple]] = {}

    def __len__(self):
        return len(self.values)

    def _push(self, value, parents=(), vjp=None) -> Var:
        self.values.append(value)
        self.parents.append(parents)
        self.vjps.append(vjp)
        return Var(self, len(self.values) - 1, value)

    def constant(self, value) -> Var:
        return self._push(np.asarray(value, dtype=np.float64))

    def param(self, theta: np.ndarray, offset: int, shape) -> Var:
        size = math.prod(shape)
        if offset + size > self.n_params:
            raise UsageError("parameter slice exceeds the tape's parameter vector")
        var = self._push(theta[offset:offset + size].reshape(shape))
        self.param_slots[var.index] = (offset, tuple(shape))
        return var

    def params(self, theta: np.ndarray) -> Var:
        """The whole flat parameter vector as one leaf."""
        return self.param(theta, 0, (len(theta),))


def backward(tape: Tape, loss_grad: float = 1.0) -> np.ndarray:
    """Gradient of the last recorded (scalar) node w.r.t. the parameter vector."""
    if tape is None or len(tape) == 0:
        raise UsageError("backward called on an empty tape")
    if tape.values[-1].size != 1:
        raise UsageError("the last recorded node must be a scalar loss")
    n = len(tape)
    grads: list = [None] * n
    grads[-1] = np.full(tape.values[-1].shape, float(loss_grad))
    flat = np.zeros(tape.n_params)
    for i in range(n - 1, -1, -1):
        g = grads[i]
        if g is None:
            continue
        grads[i] = None
        slot = tape.param_slots.get(i)
        if slot is not None:
            off, shape = slot
            flat[off:off + math.prod(shape)] += g.ravel()
            continue
        vjp = tape.vjps[i]
        if vjp is None:
            continue
        for parent, pg in zip(tape.parents[i], vjp(g)):
            if isinstance(parent, Var) and pg is not None:
                j = parent.index
                grads[j] = pg if grads[j] is None else grads[j] + pg
    return flat


# --------------------------------------------------------------------------
# ops

def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise UsageError("inputs recorded on different tapes")
            tape = x.tape
    return tape


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def linear(x, w, b):
    """``x @ w + b`` over the last axis of x."""
    xv, wv, bv = value(x), value(w), value(b)
    out = xv @ wv + bv
    tape = _tape_of(x, w, b)
    if tape is None:
        return out

    def vjp(g):
        gx = g @ wv.T if isinstance(x, Var) else None
        gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return tape._push(out, (x, w, b), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU."""
    xv = value(x)
    inner = _GELU_C * (xv + 0.044715 * xv ** 3)
    th = np.tanh(inner)
    out = 0.5 * xv * (1.0 + th)
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xv ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xv * (1.0 - th ** 2) * dinner),)

    return tape._push(out, (x,), vjp)


def concat(xs, axis=-1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._push(out, tuple(xs), vjp)


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def vjp(g):
        return _unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))

    return tape._push(out, (a, b), vjp)


def scale(x, factor):
    """Elementwise ``factor * x`` with a constant (broadcastable) factor."""
    xv = value(x)
    factor = np.asarray(factor, dtype=np.float64)
    out = factor * xv
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        return (_unbroadcast(g * factor, xv.shape),)

    return tape._push(out, (x,), vjp)


def sum_squares(x, weight: float = 1.0):
    """``weight * sum(x**2)`` as a scalar."""
    xv = value(x)
    out = np.asarray(weight * np.sum(xv * xv))
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        return (2.0 * weight * g * xv,)

    return tape._push(out, (x,), vjp)


def pack_complex(z) -> np.ndarray:
    """Complex (..., F) -> real (..., 2F) with real parts first."""
    z = np.asarray(z)
    return np.concatenate([z.real, z.imag], axis=-1)


def unpack_complex(r) -> np.ndarray:
    r = np.asarray(value(r))
    f = r.shape[-1] // 2
    return r[..., :f] + 1j * r[..., f:]
