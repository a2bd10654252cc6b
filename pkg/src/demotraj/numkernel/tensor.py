"""Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves on the tape that is active in the current
thread (see :class:`Tape`).  Outside a tape nothing is recorded, which is
the fast path used for inference.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

Array = np.ndarray


class ShapeMismatch(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class MissingGradient(RuntimeError):
    pass


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only record of differentiable operations.

    Nodes are stored in creation order, which is a valid topological order,
    so the backward pass is a single reverse sweep.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def backward(self, loss: "Tensor", seed: Array | None = None) -> None:
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, Array] = {
            id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=np.float64)
        }
        for out, parents, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return reduce_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return reduce_mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def tanh(self): return tanh(self)
    def sin(self): return sin(self)
    def cos(self): return cos(self)
    def sqrt(self): return sqrt(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: Array, op: str) -> None:
    s = data.sum()
    if not np.isfinite(s) and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: Array, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    out.requires_grad = False
    tape = current_tape()
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._tape = tape
                tape.nodes.append((out, tuple(parents), vjp))
                break
    return out


def unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return unbroadcast(ga, ad.shape), unbroadcast(-ga * out, bd.shape)

    return _make(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: Array) -> Array:
    # split on sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return _make(out, (a,), lambda g: (g * _sigmoid_np(ad),), "softplus")


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu_grad(x: Array, cdf: Array | None = None) -> Array:
    if cdf is None:
        cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad * _SQRT1_2))
    return _make(ad * cdf, (a,), lambda g: (g * _gelu_grad(ad, cdf),), "gelu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Hard clamp; gradient passes only strictly inside the interval."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad > lo) & (ad < hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def where(cond: Array, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.data.shape, b.data.shape
    return _make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (unbroadcast(np.where(cond, g, 0.0), sa), unbroadcast(np.where(cond, 0.0, g), sb)),
        "where",
    )


# ------------------------------------------------------------------ linear alg


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatch("matmul operands need at least 2 dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")

    need_a, need_b = a.requires_grad, b.requires_grad

    flat = bd.ndim == 2 and ad.ndim > 2  # weight matrix: fold leading axes into one GEMM

    def vjp(g):
        if not need_a:
            ga = None
        elif flat:
            ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
        else:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if not need_b:
            gb = None
        elif bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:]) if flat else ad @ bd
    return _make(out, (a, b), vjp, "matmul")


# ------------------------------------------------------------------ reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    axes = _norm_axes(axis, a.data.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    axes = _norm_axes(axis, a.data.ndim)
    n = 1
    for ax in axes:
        n *= shape[ax]

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return _make(np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), (a,), vjp, "mean")


# ------------------------------------------------------------------ structure


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, old),), "broadcast")


def getitem(a, idx) -> Tensor:
    """Basic or advanced indexing.  Repeated advanced indices accumulate."""
    a = as_tensor(a)
    shape = a.data.shape

    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), vjp, "getitem")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    datas = [t.data for t in ts]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    ax = axis % out.ndim
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, ts, vjp, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    ax = axis % out.ndim

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _make(out, ts, vjp, "stack")


# ------------------------------------------------------------- fused helpers


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp, "log_softmax")


LN_EPS = 1e-5


def normalize(a, eps: float = LN_EPS) -> Tensor:
    """Standardize along the last axis (the pre-affine part of layer norm)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), vjp, "normalize")


def linear_scan(decay, inputs, axis: int = -3) -> Tensor:
    """All states of ``h_t = decay_t * h_{t-1} + inputs_t`` (h_{-1} = 0) along ``axis``.

    The backward pass is the matching reverse-time recurrence.
    """
    a, u = as_tensor(decay), as_tensor(inputs)
    if a.shape != u.shape:
        raise ShapeMismatch(f"linear_scan: decay {a.shape} vs inputs {u.shape}")
    ad = np.moveaxis(a.data, axis, 0)
    ud = np.moveaxis(u.data, axis, 0)
    steps = ad.shape[0]
    if steps < 1:
        raise ShapeMismatch("linear_scan needs at least one step")
    h = np.empty_like(ud)
    h[0] = ud[0]
    for t in range(1, steps):
        h[t] = ad[t] * h[t - 1] + ud[t]

    def vjp(g):
        g = np.moveaxis(g, axis, 0)
        lam = np.empty_like(g)
        lam[-1] = g[-1]
        for t in range(steps - 2, -1, -1):
            lam[t] = g[t] + ad[t + 1] * lam[t + 1]
        ga = np.zeros_like(lam)
        ga[1:] = lam[1:] * h[:-1]
        return np.moveaxis(ga, 0, axis), np.moveaxis(lam, 0, axis)

    return _make(np.moveaxis(h, 0, axis), (a, u), vjp, "linear_scan")


def gru_recurrence(gates_in, W_h, b_h) -> Tensor:
    """All hidden states of a GRU given precomputed input gates.

    gates_in (..., T, 3H) holds ``x_t W_i + b_i`` in gate order reset,
    update, candidate; the state starts at zero.  Returns (..., T, H).
    Backpropagation through time runs inside a single tape node.
    """
    gi_t, W_t, b_t = as_tensor(gates_in), as_tensor(W_h), as_tensor(b_h)
    gi, W, b = gi_t.data, W_t.data, b_t.data
    H = W.shape[0]
    if W.shape != (H, 3 * H) or gi.shape[-1] != 3 * H or b.shape != (3 * H,):
        raise ShapeMismatch(f"gru_recurrence: gates {gi.shape}, W_h {W.shape}, b_h {b.shape}")
    steps = gi.shape[-2]
    lead = gi.shape[:-2]
    hs = np.zeros(lead + (steps + 1, H))
    rs = np.empty(lead + (steps, H))
    zs = np.empty_like(rs)
    ns = np.empty_like(rs)
    ghn = np.empty_like(rs)
    for t in range(steps):
        h = hs[..., t, :]
        gh = h @ W + b
        r = _sigmoid_np(gi[..., t, :H] + gh[..., :H])
        z = _sigmoid_np(gi[..., t, H : 2 * H] + gh[..., H : 2 * H])
        n = np.tanh(gi[..., t, 2 * H :] + r * gh[..., 2 * H :])
        hs[..., t + 1, :] = (1.0 - z) * n + z * h
        rs[..., t, :], zs[..., t, :], ns[..., t, :], ghn[..., t, :] = r, z, n, gh[..., 2 * H :]

    def vjp(g):
        d_gi = np.empty(gi.shape)
        d_W = np.zeros_like(W)
        d_b = np.zeros_like(b)
        dh = np.zeros(lead + (H,))
        for t in range(steps - 1, -1, -1):
            dh = dh + g[..., t, :]
            r, z, n, h_prev = rs[..., t, :], zs[..., t, :], ns[..., t, :], hs[..., t, :]
            dan = dh * (1.0 - z) * (1.0 - n * n)
            daz = dh * (h_prev - n) * z * (1.0 - z)
            dar = dan * ghn[..., t, :] * r * (1.0 - r)
            d_gi[..., t, :H], d_gi[..., t, H : 2 * H], d_gi[..., t, 2 * H :] = dar, daz, dan
            dgh = np.concatenate([dar, daz, dan * r], axis=-1)
            d_W += h_prev.reshape(-1, H).T @ dgh.reshape(-1, 3 * H)
            d_b += dgh.reshape(-1, 3 * H).sum(axis=0)
            dh = dh * z + dgh @ W.T
        return d_gi, d_W, d_b

    return _make(hs[..., 1:, :].copy(), (gi_t, W_t, b_t), vjp, "gru_recurrence")
