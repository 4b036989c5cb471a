"""Central finite-difference checks of the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import layers as L
from . import tensor as tn
from .model import ECAPA, ModelConfig, apply_ablation
from .tensor import Tensor
from .train import aam_softmax_loss

STEP = 1e-5
TOLERANCE = 1e-4
# exact-zero gradients (softmax shift invariance) would otherwise divide roundoff by ~0
GRAD_FLOOR = 1e-5


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), GRAD_FLOOR)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numerical_grad(f: Callable[[], float], arr: np.ndarray, indices, step: float = STEP) -> np.ndarray:
    out = np.empty(len(indices))
    for n, idx in enumerate(indices):
        orig = arr[idx]
        arr[idx] = orig + step
        fp = f()
        arr[idx] = orig - step
        fm = f()
        arr[idx] = orig
        out[n] = (fp - fm) / (2 * step)
    return out


def _masks_equal(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class TensorCheck:
    error: float
    probed: int
    # probes whose +-step crossed a relu/clamp kink; the difference quotient is meaningless there
    skipped: int = 0


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Mapping[str, Tensor], *, max_entries: int | None = None,
                    rng: np.random.Generator | None = None, step: float = STEP,
                    tamper: Callable[[str, np.ndarray], np.ndarray] | None = None) -> dict[str, TensorCheck]:
    """Compare analytic and central-difference gradients for each named tensor.

    ``max_entries`` caps how many coordinates per tensor are probed (chosen
    at random). ``tamper`` lets a test corrupt analytic gradients.
    """
    rng = rng or np.random.default_rng(0)
    names = list(tensors)
    analytic = tn.grad(loss_fn(), [tensors[n] for n in names])

    def f() -> tuple[float, list]:
        with tn.no_grad(), tn.track_kinks() as kinks:
            return float(loss_fn().data), kinks

    _, base = f()
    results = {}
    for name, ga in zip(names, analytic):
        arr = tensors[name].data
        if tamper is not None:
            ga = tamper(name, ga)
        flat = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat = rng.choice(arr.size, size=max_entries, replace=False)
        a, n, skipped = [], [], 0
        for i in flat:
            idx = np.unravel_index(i, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + step
            fp, kp = f()
            arr[idx] = orig - step
            fm, km = f()
            arr[idx] = orig
            if not (_masks_equal(kp, base) and _masks_equal(km, base)):
                skipped += 1
                continue
            a.append(ga[idx])
            n.append((fp - fm) / (2 * step))
        err = rel_error(np.array(a), np.array(n)) if a else float("inf")
        results[name] = TensorCheck(err, len(flat), skipped)
    return results


@dataclass
class LayerReport:
    layer: str
    max_rel_error: float
    probed: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        # at least half the probes must be usable (away from kinks)
        return self.max_rel_error < TOLERANCE and self.skipped * 2 <= self.probed

    @classmethod
    def merge(cls, layer: str, checks) -> "LayerReport":
        checks = list(checks)
        return cls(layer, max(c.error for c in checks), sum(c.probed for c in checks), sum(c.skipped for c in checks))


def _with_input(x: np.ndarray, params: Mapping[str, Tensor]) -> tuple[Tensor, dict[str, Tensor]]:
    xt = Tensor(x, requires_grad=True)
    return xt, {"input": xt, **params}


def layer_reports(seed: int = 0, channels: int = 16, frames: int = 12, batch: int = 3,
                  max_entries: int = 12, tamper=None) -> list[LayerReport]:
    """Gradient checks of every building block on small random double-precision inputs."""
    rng = np.random.default_rng(seed)
    C, T, R = channels, frames, max(channels // 2, 2)
    reports = []

    def run(name, module_or_params, forward, x):
        params = module_or_params if isinstance(module_or_params, dict) else dict(module_or_params.named_parameters())
        xt, named = _with_input(x, params)
        proj = np.random.default_rng(seed + 1)
        r = proj.normal(size=np.shape(forward(xt).data))
        errs = check_gradients(lambda: tn.sum(forward(xt) * r), named, max_entries=max_entries, rng=rng,
                               tamper=(lambda n, g: tamper(name, n, g)) if tamper else None)
        reports.append(LayerReport.merge(name, errs.values()))

    x = rng.normal(size=(batch, C, T))
    w, b = Tensor(rng.normal(size=(C, C, 3)), requires_grad=True), Tensor(rng.normal(size=C), requires_grad=True)
    run("conv1d", {"weight": w, "bias": b}, lambda h: tn.conv1d(h, w, b, 2), x)
    wd = Tensor(rng.normal(size=(R, C)), requires_grad=True)
    bd = Tensor(rng.normal(size=R), requires_grad=True)
    run("dense", {"weight": wd, "bias": bd}, lambda h: tn.dense(h, wd, bd, axis=1), x)
    bn = L.BatchNorm1d(C)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, C)
    bn.beta.data[:] = rng.normal(size=C)
    run("batchnorm1d", bn, lambda h: bn(h, training=True), x)
    run("relu", {}, tn.relu, x)
    run("sigmoid", {}, tn.sigmoid, x)
    run("softmax_over_time", {}, tn.softmax_over_time, x)

    mk = dict(rng=rng, dtype=np.float64)
    se = L.SEBlock(C, R, **mk)
    run("se_block", se, se, x)
    r2 = L.Res2Conv1d(C, 3, 2, scale=4 if C % 4 == 0 else 2, **mk)
    run("res2_conv", r2, r2, x)
    blk = L.SERes2Block(C, 3, 2, scale=4 if C % 4 == 0 else 2, bottleneck=R, **mk)
    skip = rng.normal(size=x.shape)
    run("se_res2block", blk, lambda h: blk(h, skip, training=True), x)
    for mode in L.ATTENTION_MODES:
        pool = L.AttentiveStatsPool(C, R, mode, **mk)
        run(f"attentive_stats_pool[{mode}]", pool, pool, x)

    wh = Tensor(rng.normal(size=(5, C)), requires_grad=True)
    labels = rng.integers(0, 5, size=batch)
    emb = rng.normal(size=(batch, C))
    run("aam_softmax", {"weight": wh}, lambda e: aam_softmax_loss(e, wh, labels), emb)
    return reports


def tiny_config(channels: int = 16, variant: str | None = None) -> ModelConfig:
    cfg = ModelConfig(channels=channels, bottleneck=max(channels // 2, 2), mfa_channels=3 * channels)
    return apply_ablation(cfg, variant) if variant else cfg


def model_reports(config: ModelConfig, seed: int = 0, frames: int = 12, batch: int = 4, num_speakers: int = 5,
                  max_entries: int = 4, tamper=None) -> list[LayerReport]:
    """Check the full model's loss gradient, grouped per layer."""
    rng = np.random.default_rng(seed)
    model = ECAPA(config, num_speakers, seed=seed, dtype=np.float64)
    for name, p in model.named_parameters():
        if name.endswith("gamma"):
            p.data[:] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith("beta"):
            p.data[:] = rng.normal(0, 0.1, p.shape)
    x = rng.normal(size=(batch, config.input_dim, frames))
    labels = rng.integers(0, num_speakers, size=batch)
    xt = Tensor(x)

    def loss():
        return aam_softmax_loss(model.forward(xt, training=True), model.head.weight, labels)

    errs = check_gradients(loss, dict(model.named_parameters()), max_entries=max_entries, rng=rng,
                           tamper=(lambda n, g: tamper("model", n, g)) if tamper else None)
    grouped: dict[str, list[TensorCheck]] = {}
    for name, c in errs.items():
        grouped.setdefault(name.rsplit(".", 1)[0], []).append(c)
    return [LayerReport.merge(f"model.{k}", v) for k, v in grouped.items()]
