"""AAM-softmax objective, Adam with weight decay, triangular2 cyclical LR, training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import features as ft
from .model import ECAPA, is_head, save_checkpoint
from .seeding import stream
from .tensor import Tensor

log = logging.getLogger(__name__)

COS_CLAMP = 1e-9


@dataclass(frozen=True)
class AAMConfig:
    margin: float = 0.2
    scale: float = 30.0

    def __post_init__(self):
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError("margin must lie in [0, pi/2)")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


def _normalize_rows(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError(f"zero-norm {what} cannot be scored")
    return x / norm, norm


def cosine_logits(embeddings: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Plain cosine similarities ``[B, S]`` (no margin, no scale)."""
    e, _ = _normalize_rows(np.atleast_2d(embeddings).astype(np.float64), "embedding")
    w, _ = _normalize_rows(weights.astype(np.float64), "class weight")
    return e @ w.T


def aam_softmax_loss(embeddings: Tensor, weights: Tensor, labels, aam: AAMConfig = AAMConfig()) -> Tensor:
    """Mean additive-angular-margin cross-entropy over the batch.

    The target logit is ``s*cos(theta_y + m)`` with
    ``cos(theta+m) = cos(theta)cos(m) - sin(theta)sin(m)``; other logits are
    ``s*cos(theta_j)``. Computed in float64 regardless of input precision.
    """
    single = embeddings.ndim == 1
    E = np.atleast_2d(embeddings.data).astype(np.float64)
    W = weights.data.astype(np.float64)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B = E.shape[0]
    if labels.shape != (B,):
        raise ValueError("need one label per embedding")
    en, enorm = _normalize_rows(E, "embedding")
    wn, wnorm = _normalize_rows(W, "class weight")
    raw = en @ wn.T
    cos = np.clip(raw, -1 + COS_CLAMP, 1 - COS_CLAMP)
    rows = np.arange(B)
    cy = cos[rows, labels]
    sy = np.sqrt(1.0 - cy * cy)
    cm, sm = math.cos(aam.margin), math.sin(aam.margin)
    logits = aam.scale * cos
    logits[rows, labels] = aam.scale * (cy * cm - sy * sm)

    top = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - top)
    is_top = np.zeros_like(ex, dtype=bool)
    is_top[rows, logits.argmax(axis=1)] = True
    # (top - z_y) before adding log1p: no cancellation when the target wins, so tiny losses stay accurate
    losses = (top[:, 0] - logits[rows, labels]) + np.log1p(np.where(is_top, 0.0, ex).sum(axis=1))
    prob = ex / ex.sum(axis=1, keepdims=True)

    def backward(g):
        g = float(np.asarray(g).reshape(()))
        dlogits = prob.copy()
        dlogits[rows, labels] -= 1.0
        dlogits *= g / B
        dcos = aam.scale * dlogits
        dcos[rows, labels] = aam.scale * dlogits[rows, labels] * (cm + cy / sy * sm)
        dcos *= (raw > -1 + COS_CLAMP) & (raw < 1 - COS_CLAMP)
        den = dcos @ wn
        dwn = dcos.T @ en
        dE = (den - en * (den * en).sum(axis=1, keepdims=True)) / enorm
        dW = (dwn - wn * (dwn * wn).sum(axis=1, keepdims=True)) / wnorm
        dE = dE[0] if single else dE
        return dE.astype(embeddings.dtype), dW.astype(weights.dtype)

    return Tensor._from_op(np.asarray(losses.mean(), dtype=embeddings.dtype), (embeddings, weights), backward)


@dataclass(frozen=True)
class LRSchedule:
    lr_min: float = 1e-8
    lr_max: float = 1e-3
    cycle_len: int = 130_000
    policy: str = "triangular2"
    # "full": cycle_len spans up+down; "stepsize": cycle_len is one leg
    cycle_mode: str = "full"

    def __post_init__(self):
        if self.policy != "triangular2":
            raise ValueError(f"unsupported policy {self.policy!r}")
        if self.cycle_mode not in ("full", "stepsize"):
            raise ValueError(f"unknown cycle_mode {self.cycle_mode!r}")
        if not 0 <= self.lr_min <= self.lr_max or self.cycle_len < 1:
            raise ValueError("invalid schedule bounds")


def cyclical_lr(iteration: int, sched: LRSchedule = LRSchedule()) -> float:
    """Triangular wave between lr_min and lr_max, amplitude halved every cycle."""
    period = sched.cycle_len if sched.cycle_mode == "full" else 2 * sched.cycle_len
    cycle, pos = divmod(iteration, period)
    x = pos / period
    return sched.lr_min + (sched.lr_max - sched.lr_min) * 2.0 ** (-cycle) * (1.0 - abs(2.0 * x - 1.0))


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    decay: list[float]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], decay: Sequence[float] | float = 0.0, **kw) -> "OptimState":
        if isinstance(decay, (int, float)):
            decay = [float(decay)] * len(params)
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params],
                   decay=list(decay), **kw)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimState, lr: float) -> None:
    """One bias-corrected Adam update in place; decay is added to the gradient."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if state.decay[i]:
            g = g + state.decay[i] * p.data
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data -= update.astype(p.dtype)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 32
    crop_frames: int = 200
    schedule: LRSchedule = LRSchedule(cycle_len=1000)
    aam: AAMConfig = AAMConfig()
    weight_decay: float = 2e-5
    head_weight_decay: float = 2e-4
    spec_augment: ft.SpecAugmentConfig | None = field(default_factory=ft.SpecAugmentConfig)
    checkpoint_every: int = 0
    log_every: int = 50

    @classmethod
    def reference(cls) -> "TrainConfig":
        return cls(iterations=4 * 130_000, batch_size=128, schedule=LRSchedule())


@dataclass
class FitResult:
    trace: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["iteration", "lr", "loss", "accuracy"])
            w.writeheader()
            w.writerows(self.trace)


def _batch_indices(n: int, batch: int, rng: np.random.Generator):
    """Endless stream of index batches: reshuffled passes, or with-replacement draws if batch > n."""
    if batch > n:
        while True:
            yield rng.integers(0, n, size=batch)
    order, pos = rng.permutation(n), 0
    while True:
        if pos + batch > n:
            order, pos = rng.permutation(n), 0
        yield order[pos:pos + batch]
        pos += batch


def make_batch(utterances: Sequence[np.ndarray], idx, crop_frames: int, rng: np.random.Generator,
               augment: ft.SpecAugmentConfig | None, dtype) -> np.ndarray:
    out = np.empty((len(idx), utterances[0].shape[0], crop_frames), dtype=dtype)
    for row, i in enumerate(idx):
        f = ft.cms(ft.random_crop(utterances[i], crop_frames, rng))
        if augment is not None:
            f = ft.spec_augment(f, augment, rng)
        out[row] = f
    return out


def fit(model: ECAPA, corpus: Sequence[tuple[np.ndarray, int]], cfg: TrainConfig = TrainConfig(), seed: int = 0,
        checkpoint_dir=None, on_log: Callable[[dict], None] | None = None) -> FitResult:
    """Train ``model`` in place on ``(features [80, T], speaker index)`` pairs."""
    if not corpus:
        raise ValueError("empty training corpus")
    utts = [f for f, _ in corpus]
    labels = np.array([y for _, y in corpus], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= model.num_speakers:
        raise ValueError("speaker label outside the classifier range")
    named = list(model.named_parameters())
    params = [p for _, p in named]
    decay = [cfg.head_weight_decay if is_head(n) else cfg.weight_decay for n, _ in named]
    state = OptimState.for_params(params, decay)
    batches = _batch_indices(len(utts), cfg.batch_size, stream(seed, "shuffle"))
    crop_rng = stream(seed, "crops")
    result = FitResult()
    for it in range(cfg.iterations):
        idx = next(batches)
        x = make_batch(utts, idx, cfg.crop_frames, crop_rng, cfg.spec_augment, model.dtype)
        emb = model.forward(x, training=True)
        loss = aam_softmax_loss(emb, model.head.weight, labels[idx], cfg.aam)
        model.zero_grad()
        loss.backward()
        lr = cyclical_lr(it, cfg.schedule)
        adam_step(params, [p.grad for p in params], state, lr)
        acc = float((cosine_logits(emb.data, model.head.weight.data).argmax(axis=1) == labels[idx]).mean())
        row = {"iteration": it, "lr": lr, "loss": float(loss.data), "accuracy": acc}
        result.trace.append(row)
        if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            log.info("iter %d lr %.3g loss %.4f acc %.3f", it, lr, row["loss"], acc)
            if on_log:
                on_log(row)
        if checkpoint_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"iter{it + 1:07d}")
    return result


def classification_accuracy(model: ECAPA, corpus: Sequence[tuple[np.ndarray, int]]) -> float:
    """Eval-mode speaker-ID accuracy on full utterances (cosine argmax, no margin)."""
    hits = 0
    for f, y in corpus:
        emb = model.embed(ft.cms(f))
        hits += int(cosine_logits(emb, model.head.weight.data).argmax() == y)
    return hits / len(corpus)
