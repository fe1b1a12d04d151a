"""Minimal float64 tensors with tape-based reverse-mode differentiation.

Ops are recorded only while a :class:`Tape` is active and at least one
input requires a gradient; outside a tape every op is a plain numpy
computation. The op set is closed: add, sub, mul, scale, matmul, conv2d,
leaky_relu, sigmoid, mean, sum, square, sqrt, concat, l2_norm, log_softmax.

    >>> w = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum(square(w))
    >>> tape.backward(loss)
    >>> w.grad
    array([6.])
"""

from __future__ import annotations

import builtins
import threading
import weakref
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import NumericError, ShapeError, UsageError

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite value in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        # weak, so tape -> record -> output -> tape is not a reference cycle
        self._tape: weakref.ref | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str) -> Tensor:
        if not np.isfinite(arr).all():
            raise NumericError(f"{op} produced non-finite values")
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, "detach")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of executed ops; the reverse of it is the backward schedule.

    Records are appended in execution order, so every record's inputs were
    produced by earlier records (or are leaves). A tape may be reused for
    several backward passes; leaf gradients accumulate across them.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.is_leaf:
            if not loss.requires_grad:
                raise UsageError("loss was not produced on a tape")
            _accumulate(loss, np.ones_like(loss.data))
            return
        if loss._tape() is not self:
            raise UsageError("loss was recorded on a different tape")
        pending = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = pending.pop(id(rec.output), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    _accumulate(t, gi)
                else:
                    key = id(t)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        g = np.broadcast_to(g, t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` on the tape that recorded it."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf:
        if not loss.requires_grad:
            raise UsageError("loss was not produced on a tape")
        _accumulate(loss, np.ones_like(loss.data))
        return
    tape = loss._tape()
    if tape is None:
        raise UsageError("the tape that recorded this loss no longer exists")
    tape.backward(loss)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    result = Tensor._wrap(out, op)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._tape = weakref.ref(tape)
        tape.records.append(Record(op, inputs, result, vjp))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# --- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), a.data * b.data, vjp)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _emit("scale", (a,), a.data * s, lambda g: (g * s,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if (a.data < 0).any():
        raise NumericError("sqrt of negative value")
    out = np.sqrt(a.data)

    def vjp(g):
        # derivative is unbounded at 0; use the zero subgradient there
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _emit("sqrt", (a,), out, vjp)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _emit(
        "leaky_relu",
        (a,),
        np.where(pos, a.data, slope * a.data),
        lambda g: (np.where(pos, g, slope * g),),
    )


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


# --- reductions ---------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _emit("sum", (a,), np.asarray(out), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _emit("mean", (a,), np.asarray(out), vjp)


def l2_norm(a) -> Tensor:
    """Euclidean norm over all axes but the first; output shape ``(N,)``."""
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError(f"l2_norm expects a batch axis, got shape {a.shape}")
    flat = a.data.reshape(a.shape[0], -1)
    out = np.sqrt((flat * flat).sum(axis=1))

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        coef = np.where(out > 0, g / safe, 0.0)
        return ((flat * coef[:, None]).reshape(a.shape),)

    return _emit("l2_norm", (a,), out, vjp)


def log_softmax(a, axis: int = 1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (a,), out, vjp)


# --- structural ----------------------------------------------------------------


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ref = ts[0].shape
    for t in ts[1:]:
        if t.data.ndim != len(ref) or any(
            n != m for i, (n, m) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} do not conform")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) if t.requires_grad else None
            for t, lo, hi in zip(ts, bounds[:-1], bounds[1:])
        )

    return _emit("concat", ts, out, vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), a.data @ b.data, vjp)


def _columns(xp: np.ndarray, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    """im2col with layout (C*kh*kw, N*Ho*Wo); the innermost copy runs along W."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(c, kh, kw, n, ho, wo),
        strides=(sc, sh * dilation, sw * dilation, sn, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(c * kh * kw, n * ho * wo)


def _conv_raw(xd: np.ndarray, wd: np.ndarray, stride, padding, dilation):
    n, c, h, wdt = xd.shape
    o, _, kh, kw = wd.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wdt + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {xd.shape} too small for kernel {wd.shape}")
    if kh == kw == 1 and stride == 1 and padding == 0:
        cols = xd.transpose(1, 0, 2, 3).reshape(c, n * h * wdt)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        cols = _columns(np.ascontiguousarray(xp), kh, kw, stride, dilation, ho, wo)
    out = (wd.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    return out, cols, ho, wo


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} dilation={dilation} padding={padding}")
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shapes {x.shape} and {w.shape} do not conform")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    out, cols, ho, wo = _conv_raw(x.data, w.data, stride, padding, dilation)
    inputs = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} and weight {w.shape} do not conform")
        out = out + bias.data[None, :, None, None]
        inputs = (x, w, bias)
    out = np.ascontiguousarray(out)

    def vjp(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _conv_input_grad(g, gm, w.data, x.shape, stride, padding, dilation, ho, wo)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    return _emit("conv2d", inputs, out, vjp)


def _conv_input_grad(g, gm, wd, xshape, stride, padding, dilation, ho, wo):
    n, c, h, wdt = xshape
    o, _, kh, kw = wd.shape
    if kh == kw == 1 and stride == 1 and padding == 0:
        return (wd.reshape(o, c).T @ gm).reshape(c, n, h, wdt).transpose(1, 0, 2, 3)
    back_pad = dilation * (kh - 1) - padding
    if stride == 1 and kh == kw and back_pad >= 0:
        # transposed convolution: correlate with the flipped, channel-swapped kernel
        flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _, _, _ = _conv_raw(g, flipped, 1, back_pad, dilation)
        return gx
    dcols = (wd.reshape(o, -1).T @ gm).reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((n, c, h + 2 * padding, wdt + 2 * padding))
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r, q = i * dilation, j * dilation
            dxp[:, :, r : r + hs : stride, q : q + ws : stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
    return dxp[:, :, padding : padding + h, padding : padding + wdt]


# --- verification -------------------------------------------------------------


def grad_check(
    f: Callable[..., Tensor],
    at,
    h: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative disagreement between backprop and central differences.

    ``at`` is one array/Tensor or a sequence of them; ``f`` receives one
    Tensor per entry. Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``. With ``max_coords`` only
    that many coordinates per input (chosen by ``seed``) are probed.
    """
    if not 0 < h <= 1e-3:
        raise UsageError(f"grad_check step must lie in (0, 1e-3], got {h}")
    single = isinstance(at, (Tensor, np.ndarray)) or np.isscalar(at)
    points = [as_tensor(at).data.copy()] if single else [as_tensor(a).data.copy() for a in at]

    leaves = [Tensor(p, requires_grad=True) for p in points]
    with Tape() as tape:
        out = f(*leaves)
    if out.data.size != 1:
        raise UsageError(f"grad_check needs a scalar function, got shape {out.shape}")
    if out.requires_grad:
        tape.backward(out)

    def value(args):
        return f(*[Tensor(a) for a in args]).item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, (leaf, p) in enumerate(zip(leaves, points)):
        analytic = np.zeros(p.shape) if leaf.grad is None else leaf.grad
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        for idx in coords:
            args = [q.copy() for q in points]
            args[k].flat[idx] += h
            fp = value(args)
            args[k].flat[idx] -= 2 * h
            fm = value(args)
            numeric = (fp - fm) / (2 * h)
            a = analytic.flat[idx]
            worst = builtins.max(worst, abs(a - numeric) / builtins.max(1.0, abs(a)))
    return worst
