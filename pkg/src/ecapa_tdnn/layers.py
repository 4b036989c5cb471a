"""ECAPA-TDNN building blocks.

All blocks take batched frame-level input ``[B, C, T]``; passing ``[C, T]``
is also accepted and returns the unbatched result.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import Tensor

ATTENTION_MODES = ("channel_context", "channel_no_context", "temporal_only")


class Module:
    """Minimal parameter container.

    Trainable parameters are ``Tensor`` attributes with ``requires_grad``;
    buffers (running statistics) are plain ``np.ndarray`` attributes.
    Submodules may be attributes or lists of modules.
    """

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Conv1d(Module):
    def __init__(self, cin: int, cout: int, kernel_size: int, dilation: int = 1, *, rng, dtype=np.float64):
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        self.dilation = dilation
        fan_in = cin * kernel_size
        self.weight = _uniform(rng, (cout, cin, kernel_size), fan_in, dtype)
        self.bias = _uniform(rng, (cout,), fan_in, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.conv1d(x, self.weight, self.bias, self.dilation)


class Dense(Module):
    """Fully-connected layer; on ``[B, C, T]`` it acts framewise (a k=1 conv)."""

    def __init__(self, cin: int, cout: int, *, rng, dtype=np.float64, bias: bool = True):
        self.weight = _uniform(rng, (cout, cin), cin, dtype)
        self.bias = _uniform(rng, (cout,), cin, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return tn.dense(x, self.weight, self.bias, axis=1)


class BatchNorm1d(Module):
    def __init__(self, channels: int, *, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return tn.batchnorm1d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training, self.momentum, self.eps)


def _batched(fn):
    def wrapper(self, h, *args, **kwargs):
        h = tn.tensor(h)
        if h.ndim == 2:
            out = fn(self, tn.reshape(h, (1,) + h.shape), *args, **kwargs)
            return tn.reshape(out, out.shape[1:])
        return fn(self, h, *args, **kwargs)
    wrapper.__doc__ = fn.__doc__
    return wrapper


class SEBlock(Module):
    """Squeeze-excitation: gate each channel by a function of its time average."""

    def __init__(self, channels: int, bottleneck: int = 128, *, rng, dtype=np.float64):
        self.linear1 = Dense(channels, bottleneck, rng=rng, dtype=dtype)
        self.linear2 = Dense(bottleneck, channels, rng=rng, dtype=dtype)

    def gates(self, h: Tensor) -> Tensor:
        """Channel weights ``s`` in (0, 1), shape ``[B, C]``."""
        if h.shape[-1] < 1:
            raise ValueError("SE block needs T >= 1")
        z = tn.mean(h, axis=2)
        return tn.sigmoid(self.linear2(tn.relu(self.linear1(z))))

    @_batched
    def __call__(self, h: Tensor) -> Tensor:
        s = self.gates(h)
        return h * tn.reshape(s, s.shape + (1,))


class Res2Conv1d(Module):
    """Multi-scale dilated convolution with hierarchical group connections.

    Channels are split into ``scale`` groups; the first group passes through,
    group 2 is convolved, and every later group is convolved after adding the
    previous group's output.
    """

    def __init__(self, channels: int, kernel_size: int, dilation: int, scale: int = 8, *, rng, dtype=np.float64):
        if channels % scale:
            raise ValueError(f"channels ({channels}) must be divisible by scale ({scale})")
        width = channels // scale
        self.scale = scale
        self.convs = [Conv1d(width, width, kernel_size, dilation, rng=rng, dtype=dtype) for _ in range(scale - 1)]

    @_batched
    def __call__(self, h: Tensor) -> Tensor:
        xs = tn.split(h, self.scale, axis=1)
        ys = [xs[0]]
        for i in range(1, self.scale):
            inp = xs[i] if i == 1 else xs[i] + ys[-1]
            ys.append(self.convs[i - 1](inp))
        return tn.concat(ys, axis=1)


class SERes2Block(Module):
    """dense -> relu -> BN -> Res2 conv -> relu -> BN -> dense -> relu -> BN -> SE.

    The caller supplies the skip term so the model can switch between
    standard, summed and absent residual connections.
    """

    def __init__(self, channels: int, kernel_size: int, dilation: int, scale: int = 8, bottleneck: int = 128,
                 *, se: bool = True, res2: bool = True, rng, dtype=np.float64):
        self.conv_in = Dense(channels, channels, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm1d(channels, dtype=dtype)
        if res2:
            self.conv_mid = Res2Conv1d(channels, kernel_size, dilation, scale, rng=rng, dtype=dtype)
        else:
            self.conv_mid = Conv1d(channels, channels, kernel_size, dilation, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm1d(channels, dtype=dtype)
        self.conv_out = Dense(channels, channels, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm1d(channels, dtype=dtype)
        self.se = SEBlock(channels, bottleneck, rng=rng, dtype=dtype) if se else None

    def body(self, h: Tensor, training: bool = False) -> Tensor:
        out = self.bn1(tn.relu(self.conv_in(h)), training)
        out = self.bn2(tn.relu(self.conv_mid(out)), training)
        out = self.bn3(tn.relu(self.conv_out(out)), training)
        if self.se is not None:
            out = self.se(out)
        return out

    @_batched
    def __call__(self, h: Tensor, skip: Tensor | None = None, training: bool = False) -> Tensor:
        out = self.body(h, training)
        if skip is None:
            return out
        skip = tn.tensor(skip)
        if skip.ndim == 2:
            skip = tn.reshape(skip, (1,) + skip.shape)
        if skip.shape != out.shape:
            raise ValueError(f"skip shape {skip.shape} does not match block output {out.shape}")
        return out + skip


class AttentiveStatsPool(Module):
    """Attention-weighted mean and standard deviation over time.

    ``mode`` selects channel-dependent attention with the utterance-level
    context vector (``channel_context``), without it
    (``channel_no_context``), or a single score per frame shared by all
    channels (``temporal_only``). Returns ``[B, 2C]`` (mean then std).
    """

    def __init__(self, channels: int, bottleneck: int = 128, mode: str = "channel_context",
                 *, rng, dtype=np.float64, eps: float = 1e-6):
        if mode not in ATTENTION_MODES:
            raise ValueError(f"unknown attention mode {mode!r}")
        self.mode = mode
        self.eps = eps
        cin = 3 * channels if mode == "channel_context" else channels
        cout = 1 if mode == "temporal_only" else channels
        self.attn_in = Dense(cin, bottleneck, rng=rng, dtype=dtype)
        self.attn_out = Dense(bottleneck, cout, rng=rng, dtype=dtype)

    def _global_stats(self, h: Tensor) -> tuple[Tensor, Tensor]:
        mu = tn.mean(h, axis=2, keepdims=True)
        var = tn.mean(h * h, axis=2, keepdims=True) - mu * mu
        return mu, tn.sqrt(tn.clamp_min(var, self.eps))

    def attention(self, h: Tensor) -> Tensor:
        """Softmax-normalized weights ``[B, C or 1, T]``."""
        if h.shape[-1] < 1:
            raise ValueError("attentive pooling needs T >= 1")
        inp = h
        if self.mode == "channel_context":
            mu, sigma = self._global_stats(h)
            inp = tn.concat([h, tn.broadcast_to(mu, h.shape), tn.broadcast_to(sigma, h.shape)], axis=1)
        scores = self.attn_out(tn.relu(self.attn_in(inp)))
        return tn.softmax_over_time(scores)

    @_batched
    def __call__(self, h: Tensor) -> Tensor:
        alpha = self.attention(h)
        mu = tn.sum(alpha * h, axis=2)
        second = tn.sum(alpha * (h * h), axis=2)
        sigma = tn.sqrt(tn.clamp_min(second - mu * mu, self.eps))
        return tn.concat([mu, sigma], axis=1)
