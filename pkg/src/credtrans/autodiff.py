"""Minimal reverse-mode differentiation on NumPy arrays.

Values are float64 arrays of rank >= 1; the leading axes act as batch axes
and every matrix-like op works on the last two.  Operations executed while a
:class:`Tape` is active (``with Tape() as tape:``) are recorded if any input
requires a gradient; :func:`backward` then walks the records in reverse.

Outside a tape nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from . import kernels

_state = threading.local()
_ids = itertools.count()

ACTIVATIONS = ("gelu", "silu", "sigmoid", "tanh", "exp", "linear")


class Tensor:
    """An array flowing through the graph."""

    __slots__ = ("value", "requires_grad", "__weakref__")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A trainable leaf.  ``grad`` accumulates across :func:`backward` calls."""

    __slots__ = ("grad", "name", "id", "decay")

    def __init__(self, value, name: str = "", decay: bool = False):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.id = next(_ids)
        self.decay = decay

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_value, inputs: tuple, backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_value, requires_grad=True)
        tape.records.append((out, inputs, backward_fn))
        return out
    return Tensor(out_value)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(parameter) into every reachable ``Parameter.grad``."""
    if not tape.records:
        raise RuntimeError("backward called before any forward pass was recorded")
    if loss.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not any(out is loss for out, _, _ in tape.records):
        raise RuntimeError("loss was not produced by an operation recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                inp.grad += gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    """Hadamard product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def grad(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _record(av * bv, (a, b), grad)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.value * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.value)
    return _record(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise ValueError("log of a non-positive value")
    x = a.value
    return _record(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = expit(a.value)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    s = expit(x)
    return _record(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    a = as_tensor(a)
    x = np.ascontiguousarray(a.value)
    flat = x.reshape(-1)
    y = kernels.gelu_forward(flat).reshape(x.shape)

    def grad(g):
        g = np.ascontiguousarray(g).reshape(-1)
        return (kernels.gelu_backward(flat, g).reshape(x.shape),)

    return _record(y, (a,), grad)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _record(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def identity(a) -> Tensor:
    return as_tensor(a)


_ACTIVATION_FNS = {
    "gelu": gelu,
    "silu": silu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "linear": identity,
}


def activation(name: str, a) -> Tensor:
    try:
        return _ACTIVATION_FNS[name](a)
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}") from None


# ------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (NumPy broadcasting).

    A rank-1 left operand is treated as a row vector.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim == 2:
        return reshape(matmul(reshape(a, (1, -1)), b), (-1,))
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def grad(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                k = av.shape[-1]
                gb = av.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _record(av @ bv, (a, b), grad)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _record(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(
        np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),)
    )


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def grad(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([t.value for t in ts], axis=axis), ts, grad)


def stack(tensors: Sequence, axis: int) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)

    def grad(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(np.stack([t.value for t in ts], axis=axis), ts, grad)


def select(a, index: int, axis: int = -2) -> Tensor:
    """Take one slice along ``axis`` (drops the axis), e.g. one row of a matrix."""
    a = as_tensor(a)
    shape = a.shape

    def grad(g):
        out = np.zeros(shape)
        idx = [slice(None)] * len(shape)
        idx[axis] = index
        out[tuple(idx)] = g
        return (out,)

    return _record(np.take(a.value, index, axis=axis), (a,), grad)


def take_rows(table, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table: ``table[idx]`` (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    shape = table.shape

    def grad(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(table.value[idx], (table,), grad)


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def grad(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _record(np.cumsum(a.value, axis=axis), (a,), grad)


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.value.sum(axis=axis, keepdims=keepdims), (a,), grad)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------ normalisations


def _last_axis_2d(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis, stabilised by the row maximum."""
    a = as_tensor(a)
    if a.value.size == 0:
        raise ValueError("empty tensor")
    shape = a.shape
    y = kernels.softmax_forward(_last_axis_2d(a.value))

    def grad(g):
        return (kernels.softmax_backward(y, _last_axis_2d(g)).reshape(shape),)

    return _record(y.reshape(shape), (a,), grad)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to mean 0 / population variance 1, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    shape = x.shape
    if shape[-1] < 2:
        raise ValueError("layer_norm needs width >= 2")
    gv = np.ascontiguousarray(gamma.value)
    y, xhat, rstd = kernels.layer_norm_forward(
        _last_axis_2d(x.value), gv, np.ascontiguousarray(beta.value), float(eps)
    )
    if not np.all(np.isfinite(rstd)):
        raise ValueError("degenerate variance")

    def grad(g):
        gx, dgamma, dbeta = kernels.layer_norm_backward(_last_axis_2d(g), xhat, rstd, gv)
        return gx.reshape(shape), dgamma, dbeta

    return _record(y.reshape(shape), (x, gamma, beta), grad)


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ----------------------------------------------------------------------- PLE


def ple_encode(x, boundaries) -> Tensor:
    """Piecewise linear encoding of a 1-D batch ``x`` against ``boundaries``.

    Component ``j`` is 1 above bin ``j``, 0 below it and linear inside it.
    Zero-width bins encode as a step at their boundary and carry no gradient.
    Differentiable in both ``x`` and the boundaries.
    """
    x, boundaries = as_tensor(x), as_tensor(boundaries)
    xv = np.ascontiguousarray(x.value.reshape(-1))
    bv = np.ascontiguousarray(boundaries.value)
    if bv.ndim != 1 or bv.shape[0] < 2:
        raise ValueError("boundaries must be a vector of length >= 2")
    e = kernels.ple_forward(xv, bv)

    def grad(g):
        gx, gb = kernels.ple_backward(xv, bv, np.ascontiguousarray(g))
        return gx.reshape(x.shape), gb

    return _record(e, (x, boundaries), grad)


# ---------------------------------------------------------------------- misc


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def make_rng(seed) -> np.random.Generator:
    """Seedable, splittable generator (``rng.spawn(n)`` yields independent streams)."""
    return np.random.default_rng(seed)
