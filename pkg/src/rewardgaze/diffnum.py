"""Dense float32 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active on
the current thread, every operation with at least one ``requires_grad``
input appends a node to it; :meth:`Tape.backward` then walks those nodes in
reverse execution order. Outside a tape nothing is recorded, which is how
inference passes avoid building graphs.

    with Tape() as tape:
        loss = mean(relu(x @ w))
    tape.backward(loss)
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_local = threading.local()


def working_dtype():
    """Storage dtype for new tensors on this thread (float32 unless inside :func:`precision`)."""
    return getattr(_local, "dtype", DTYPE)


@contextmanager
def precision(dtype):
    """Build and evaluate tensors in ``dtype`` on this thread, e.g. float64 reference checks."""
    prev = working_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    """A forward operation produced NaN or inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=working_dtype())  # always copies
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.grad = None
    t.requires_grad = False
    t.name = None
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Execution-ordered record of differentiable operations.

    A tape belongs to the thread that created it. Tapes may nest; only the
    innermost active tape records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    @staticmethod
    def current() -> "Tape | None":
        stack = _stack()
        return stack[-1] if stack else None

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``requires_grad`` t."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = inp
        for key, g in grads.items():
            t = owners[key]
            if not t.requires_grad:
                continue
            g = g.astype(t.data.dtype, copy=False).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


@contextmanager
def no_grad():
    """Suspend recording on the current thread, even inside an active tape."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _result(out: np.ndarray, inputs: tuple[Tensor, ...], fn) -> Tensor:
    out = np.asarray(out, dtype=working_dtype())
    if not np.isfinite(out).all():
        raise NumericError("operation produced a non-finite value")
    t = _wrap(out)
    tape = Tape.current()
    if tape is not None and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        tape.nodes.append(_Node(t, inputs, fn))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = working_dtype()(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


# Linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes; a 2-D ``b`` is shared across a's batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ in {a.shape} and {b.shape}")

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), fn)


def swap_last(a: Tensor) -> Tensor:
    """Transpose the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"swap_last: need at least 2 axes, got shape {a.shape}")
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def take_rows(a: Tensor, idx) -> Tensor:
    """Select entries along axis 0."""
    idx = np.asarray(idx, dtype=np.int64)

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), fn)


# Reductions


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(_seq_sum(a.data, axis), (a,), fn)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def mean_pool(a: Tensor, axis: int) -> Tensor:
    """Average over ``axis`` (removed from the result)."""
    return mean(a, axis)


def _seq_sum(x: np.ndarray, axis: int | None) -> np.ndarray:
    # numpy's pairwise summation order depends on memory layout; a plain
    # left-to-right reduction keeps results reproducible across views.
    if axis is None:
        x = x.reshape(-1)
        axis = 0
    axis = axis % x.ndim
    moved = np.moveaxis(x, axis, 0)
    acc = np.zeros(moved.shape[1:], dtype=working_dtype())
    for row in moved:
        acc = acc + row
    return acc


def l2_norm_rowwise(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis. The gradient at a zero row is zero."""
    n = np.sqrt(np.sum(a.data * a.data, axis=-1))

    def fn(g):
        safe = np.where(n > 0, n, 1.0)
        unit = np.where((n > 0)[..., None], a.data / safe[..., None], 0.0)
        return (g[..., None] * unit,)

    return _result(n, (a,), fn)


# Nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) at the working precision."""
    dt = working_dtype()
    x = a.data.astype(np.float64)
    e = np.exp(-np.abs(x))
    s64 = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    slope = (s64 * (1.0 - s64)).astype(dt)
    s = np.clip(s64, float(np.finfo(dt).tiny), float(np.nextafter(dt(1), dt(0)))).astype(dt)
    return _result(s, (a,), lambda g: (g * slope,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _result(s, (a,), fn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    n = a.shape[-1]
    if n < 2:
        raise ValueError("layer_norm needs at least 2 entries per row")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias shapes {gain.shape}, {bias.shape} do not match width {n}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def fn(g):
        dxhat = g * gain.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        return dx, dgain, dbias

    return _result(xhat * gain.data + bias.data, (a, gain, bias), fn)


# Optimisation


@dataclass
class AdamState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Iterable[Tensor], lr: float, **kw) -> "AdamState":
        params = list(params)
        return cls(lr=lr, m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One Adam update in place, with decoupled weight decay.

    A ``None`` gradient is treated as zero; the moment buffers still decay.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    decay = DTYPE(1.0 - state.lr * state.weight_decay)
    lr = DTYPE(state.lr)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: parameter {p.shape} vs gradient {g.shape}")
        m = state.m[i] = DTYPE(b1) * state.m[i] + DTYPE(1 - b1) * g
        v = state.v[i] = DTYPE(b2) * state.v[i] + DTYPE(1 - b2) * g * g
        mhat = m / DTYPE(corr1)
        vhat = v / DTYPE(corr2)
        p.data = (p.data * decay - lr * mhat / (np.sqrt(vhat) + DTYPE(state.eps))).astype(DTYPE)


class Adam:
    """Convenience wrapper binding an :class:`AdamState` to a parameter list."""

    def __init__(self, params: Iterable[Tensor], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr, weight_decay=weight_decay,
                                          beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


def finite_difference(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-3,
                      coords: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central-difference estimate of d fn()/dx at ``coords`` (all entries by default).

    Entries not in ``coords`` are left as NaN.
    """
    est = np.full(x.shape, np.nan, dtype=np.float64)
    coords = list(np.ndindex(*x.shape)) if coords is None else list(coords)
    for idx in coords:
        orig = x.data[idx]
        step = x.data.dtype.type
        hi, lo = step(orig + h), step(orig - h)
        x.data[idx] = hi
        fp = float(fn().data.astype(np.float64).sum())
        x.data[idx] = lo
        fm = float(fn().data.astype(np.float64).sum())
        x.data[idx] = orig
        est[idx] = (fp - fm) / (float(hi) - float(lo))
    return est


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)`` over the non-NaN entries of ``numeric``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    mask = ~np.isnan(n)
    a, n = a[mask], n[mask]
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))
