"""Dense tensors with reverse-mode differentiation.

Only the operations needed by the ECAPA-TDNN stack are provided. Every op
records a closure that maps the output gradient to one gradient per input;
``Tensor.backward`` replays those closures in reverse topological order.

Layout conventions: frame-level activations are ``[B, C, T]`` (unbatched
``[C, T]`` is accepted by ``conv1d`` and ``dense``), utterance-level vectors
are ``[B, C]``.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

# per-thread: graphs are confined to the thread that records them
_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def _kink_log() -> list | None:
    return getattr(_local, "kinks", None)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (current thread only)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def track_kinks():
    """Record the active/inactive masks of every piecewise op run inside the block."""
    prev = _kink_log()
    _local.kinks = log = []
    try:
        yield log
    finally:
        _local.kinks = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """An n-dimensional real array that optionally tracks gradients.

    Leaves created with ``requires_grad=True`` are trainable parameters; their
    ``grad`` attribute accumulates across ``backward`` calls until
    ``zero_grad`` is called.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls(data)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every trainable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Return d(loss)/d(param) for each parameter; zeros when disconnected."""
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    loss.backward()
    out = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p, s in zip(params, saved):
        p.grad = s
    return out


def tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _lift(a, like: Tensor | None = None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(a, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return Tensor._from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    if (kinks := _kink_log()) is not None:
        kinks.append(x.data > 0)
    return Tensor._from_op(y, (x,), lambda g: (g * (y > 0),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._from_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g / (2.0 * y),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); the gradient is zero where the floor is active."""
    keep = x.data > floor
    if (kinks := _kink_log()) is not None:
        kinks.append(keep)
    return Tensor._from_op(np.where(keep, x.data, floor).astype(x.dtype), (x,), lambda g: (g * keep,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward)


def softmax_over_time(x: Tensor) -> Tensor:
    """Channel-wise softmax across the last (time) axis."""
    return softmax(x, axis=-1)


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._from_op(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        out = np.zeros_like(x.data)
        out[idx] += g
        return (out,)

    return Tensor._from_op(x.data[idx], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def split(x: Tensor, parts: int, axis: int = 1) -> list[Tensor]:
    n = x.shape[axis]
    if n % parts:
        raise ValueError(f"cannot split {n} channels into {parts} equal groups")
    w = n // parts
    sl = [slice(None)] * x.ndim
    out = []
    for i in range(parts):
        sl[axis] = slice(i * w, (i + 1) * w)
        out.append(getitem(x, tuple(sl)))
    return out


# ---------------------------------------------------------------------------
# layers

def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Dilated 'same' cross-correlation over the last axis.

    ``y[b,c,t] = sum_{i,j} w[c,i,j] * x[b,i,t+(j-k//2)*dilation] + bias[c]``
    with zero padding; accepts ``[Cin, T]`` or ``[B, Cin, T]``.
    """
    if x.ndim == 2:
        return reshape(conv1d(reshape(x, (1,) + x.shape), weight, bias, dilation), (weight.shape[0], x.shape[1]))
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError("conv1d expects input [B,Cin,T] and weight [Cout,Cin,k]")
    B, cin, T = x.shape
    cout, wcin, k = weight.shape
    if wcin != cin:
        raise ValueError(f"conv1d channel mismatch: input has {cin}, weight expects {wcin}")
    if k % 2 == 0:
        raise ValueError(f"conv1d needs an odd kernel size, got {k}")
    if T < 1:
        raise ValueError("conv1d needs T >= 1")
    if dilation < 1:
        raise ValueError("dilation must be positive")
    pad = (k - 1) * dilation // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    cols = np.stack([xp[:, :, j * dilation:j * dilation + T] for j in range(k)], axis=2).reshape(B, cin * k, T)
    wm = weight.data.reshape(cout, cin * k)
    y = np.matmul(wm, cols)
    if bias is not None:
        y += bias.data[:, None]

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = np.matmul(wm.T, g).reshape(B, cin, k, T)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j * dilation:j * dilation + T] += gcols[:, :, j]
        gx = gxp[:, :, pad:pad + T]
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(y, parents, backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None, axis: int = 0) -> Tensor:
    """``y = W x + b`` applied along ``axis`` (the channel axis), framewise."""
    axis = axis % x.ndim
    cout, cin = weight.shape
    if x.shape[axis] != cin:
        raise ValueError(f"dense dimension mismatch: input has {x.shape[axis]}, weight expects {cin}")
    if x.ndim == 3 and axis == 1:
        return _dense_frames(x, weight, bias)
    y = np.moveaxis(np.tensordot(weight.data, x.data, axes=([1], [axis])), 0, axis)
    bshape = [1] * x.ndim
    bshape[axis] = cout
    if bias is not None:
        y = y + bias.data.reshape(bshape)
    other = [a for a in range(x.ndim) if a != axis]

    def backward(g):
        gw = np.tensordot(np.moveaxis(g, axis, 0), np.moveaxis(x.data, axis, 0),
                          axes=(list(range(1, x.ndim)), list(range(1, x.ndim))))
        gx = np.moveaxis(np.tensordot(weight.data.T, g, axes=([1], [axis])), 0, axis)
        gb = g.sum(axis=tuple(other)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(np.ascontiguousarray(y), parents, backward)


def _dense_frames(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    # [B, Cin, T] fast path: batched matmul, no axis shuffling
    y = np.matmul(weight.data, x.data)
    if bias is not None:
        y += bias.data[:, None]

    def backward(g):
        gw = np.matmul(g, x.data.transpose(0, 2, 1)).sum(axis=0)
        gx = np.matmul(weight.data.T, g)
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(y, parents, backward)


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over channel axis 1 of ``[B, C]`` or ``[B, C, T]``.

    Training mode normalizes with batch statistics (over batch and time) and
    updates the running buffers in place; eval mode uses the buffers.
    """
    if x.ndim not in (2, 3):
        raise ValueError("batchnorm1d expects [B,C] or [B,C,T]")
    if x.ndim == 3 and x.shape[2] == 0:
        raise ValueError("batchnorm1d got a zero-length time axis")
    axes = (0,) if x.ndim == 2 else (0, 2)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    g_ = gamma.data.reshape(shape)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * invstd.reshape(shape)
    y = g_ * xhat + beta.data.reshape(shape)
    n = x.data.size // x.shape[1]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * g_
        if training:
            gx = (invstd.reshape(shape) / n) * (
                n * gxhat
                - gxhat.sum(axis=axes).reshape(shape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(shape))
        else:
            gx = gxhat * invstd.reshape(shape)
        return gx, ggamma, gbeta

    return Tensor._from_op(y, (x, gamma, beta), backward)
