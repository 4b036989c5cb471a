"""ECAPA-TDNN topology, ablation variants, parameter counting and checkpoints."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .archive import ArchiveError, load_archive, save_archive
from .layers import ATTENTION_MODES, AttentiveStatsPool, BatchNorm1d, Conv1d, Dense, Module, SERes2Block
from .seeding import stream
from .tensor import Tensor

RESIDUAL_MODES = ("summed", "standard", "none")
VARIANTS = ("A1", "A2", "B1", "B2", "C1", "C2", "C3")


@dataclass(frozen=True)
class AblationFlags:
    attention: str = "channel_context"
    se_enabled: bool = True
    res2_enabled: bool = True
    mfa_enabled: bool = True
    residuals: str = "summed"

    def __post_init__(self):
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if self.residuals not in RESIDUAL_MODES:
            raise ValueError(f"unknown residual mode {self.residuals!r}")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 512
    input_dim: int = 80
    res2_scale: int = 8
    bottleneck: int = 128
    mfa_channels: int = 1536
    embed_dim: int = 192
    first_layer: tuple[int, int] = (5, 1)
    blocks: tuple[tuple[int, int], ...] = ((3, 2), (3, 3), (3, 4))
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.channels <= 0 or self.channels % self.res2_scale:
            raise ValueError(f"channels ({self.channels}) must be a positive multiple of res2_scale ({self.res2_scale})")
        dilations = [d for _, d in self.blocks]
        if any(b <= a for a, b in zip(dilations, dilations[1:])):
            raise ValueError("block dilations must be strictly increasing")
        if self.ablation.se_enabled and self.bottleneck >= self.channels:
            raise ValueError("SE bottleneck must be narrower than the trunk")

    @classmethod
    def reference(cls, channels: int = 512) -> "ModelConfig":
        return cls(channels=channels)

    @classmethod
    def desk(cls, channels: int = 64) -> "ModelConfig":
        """Small CPU-trainable preset: MFA width shrinks with the trunk."""
        return cls(channels=channels, bottleneck=min(128, channels // 2), mfa_channels=3 * channels)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["ablation"] = AblationFlags(**d.get("ablation", {}))
        if "first_layer" in d:
            d["first_layer"] = tuple(d["first_layer"])
        if "blocks" in d:
            d["blocks"] = tuple(tuple(b) for b in d["blocks"])
        return cls(**d)


def apply_ablation(config: ModelConfig, variant: str) -> ModelConfig:
    """Return ``config`` with the single field changed that the ablation row names."""
    changes = {
        "A1": {"attention": "temporal_only"},
        "A2": {"attention": "channel_no_context"},
        "B1": {"se_enabled": False},
        "B2": {"res2_enabled": False},
        "C1": {"mfa_enabled": False},
        "C2": {"residuals": "none"},
        "C3": {"residuals": "standard"},
    }
    key = variant.upper().replace(".", "")
    if key not in changes:
        raise ValueError(f"unknown ablation variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    return dataclasses.replace(config, ablation=dataclasses.replace(config.ablation, **changes[key]))


class ECAPA(Module):
    def __init__(self, config: ModelConfig, num_speakers: int, seed: int = 0, dtype=np.float32):
        if num_speakers < 1:
            raise ValueError("num_speakers must be positive")
        self.config = config
        self.num_speakers = num_speakers
        self.seed = seed
        rng = stream(seed, "init")
        C, fl = config.channels, config.ablation
        k0, d0 = config.first_layer
        self.conv0 = Conv1d(config.input_dim, C, k0, d0, rng=rng, dtype=dtype)
        self.bn0 = BatchNorm1d(C, dtype=dtype)
        self.blocks = [
            SERes2Block(C, k, d, config.res2_scale, config.bottleneck,
                        se=fl.se_enabled, res2=fl.res2_enabled, rng=rng, dtype=dtype)
            for k, d in config.blocks
        ]
        mfa_in = C * len(config.blocks) if fl.mfa_enabled else C
        self.mfa = Dense(mfa_in, config.mfa_channels, rng=rng, dtype=dtype)
        self.pool = AttentiveStatsPool(config.mfa_channels, config.bottleneck, fl.attention, rng=rng, dtype=dtype)
        self.pool_bn = BatchNorm1d(2 * config.mfa_channels, dtype=dtype)
        self.fc = Dense(2 * config.mfa_channels, config.embed_dim, rng=rng, dtype=dtype)
        self.fc_bn = BatchNorm1d(config.embed_dim, dtype=dtype)
        self.head = AAMHead(config.embed_dim, num_speakers, rng=rng, dtype=dtype)

    @property
    def dtype(self):
        return self.conv0.weight.dtype

    def frame_features(self, x: Tensor, training: bool = False) -> Tensor:
        """Trunk up to (and including) the MFA layer: ``[B, mfa_channels, T]``."""
        res = self.config.ablation.residuals
        out = self.bn0(tn.relu(self.conv0(x)), training)
        stages = [out]
        for block in self.blocks:
            prev = stages[-1]
            if res == "summed":
                skip = stages[0]
                for s in stages[1:]:
                    skip = skip + s
            elif res == "standard":
                skip = prev
            else:
                skip = None
            stages.append(block(prev, skip, training))
        feats = tn.concat(stages[1:], axis=1) if self.config.ablation.mfa_enabled else stages[-1]
        return tn.relu(self.mfa(feats))

    def forward(self, features, training: bool = False) -> Tensor:
        """Map ``[80, T]`` or ``[B, 80, T]`` features to embeddings ``[192]`` / ``[B, 192]``."""
        x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=self.dtype))
        single = x.ndim == 2
        if single:
            x = tn.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1] != self.config.input_dim:
            raise ValueError(f"expected features with {self.config.input_dim} rows, got shape {x.shape}")
        if x.shape[2] < 1:
            raise ValueError("features need at least one frame")
        pooled = self.pool(self.frame_features(x, training))
        emb = self.fc_bn(self.fc(self.pool_bn(pooled, training)), training)
        return tn.reshape(emb, emb.shape[1:]) if single else emb

    __call__ = forward

    def embed(self, features) -> np.ndarray:
        """Eval-mode embedding without graph recording."""
        with tn.no_grad():
            return self.forward(features, training=False).data


class AAMHead(Module):
    """Class-weight matrix for the angular-margin classifier (no bias)."""

    def __init__(self, embed_dim: int, num_speakers: int, *, rng, dtype=np.float32):
        self.weight = Tensor(rng.uniform(-1, 1, size=(num_speakers, embed_dim)).astype(dtype)
                             * np.sqrt(1.0 / embed_dim).astype(dtype), requires_grad=True)


def build(config: ModelConfig, num_speakers: int, seed: int = 0, dtype=np.float32) -> ECAPA:
    return ECAPA(config, num_speakers, seed, dtype)


def is_head(name: str) -> bool:
    return name.startswith("head.")


def param_table(model: ECAPA, scope: str = "extractor") -> list[tuple[str, int]]:
    """Per-layer parameter counts, one row per layer (weights+biases summed)."""
    if scope not in ("extractor", "full"):
        raise ValueError(f"unknown scope {scope!r}")
    rows: dict[str, int] = {}
    for name, p in model.named_parameters():
        if scope == "extractor" and is_head(name):
            continue
        layer = name.rsplit(".", 1)[0]
        rows[layer] = rows.get(layer, 0) + int(p.data.size)
    return list(rows.items())


def param_count(model: ECAPA, scope: str = "extractor") -> int:
    return sum(n for _, n in param_table(model, scope))


def state_dict(model: ECAPA) -> dict[str, np.ndarray]:
    state = {name: p.data for name, p in model.named_parameters()}
    state.update({name: b for name, b in model.named_buffers()})
    return state


CHECKPOINT_KIND = "ecapa-checkpoint"


def save_checkpoint(model: ECAPA, path, extra: dict | None = None) -> Path:
    meta = {"config": model.config.to_dict(), "num_speakers": model.num_speakers, "seed": model.seed}
    meta.update(extra or {})
    return save_archive(path, state_dict(model), meta, kind=CHECKPOINT_KIND)


def load_checkpoint(path, config: ModelConfig | None = None) -> ECAPA:
    """Rebuild a model from an archive; ``config`` (if given) must match the stored one."""
    tensors, meta = load_archive(path, kind=CHECKPOINT_KIND)
    stored = ModelConfig.from_dict(meta["config"])
    if config is not None and config != stored:
        raise ArchiveError("checkpoint config does not match the requested model config")
    model = ECAPA(stored, meta["num_speakers"], meta.get("seed", 0), dtype=np.float32)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | set(buffers)
    if set(tensors) != expected:
        missing, extra = expected - set(tensors), set(tensors) - expected
        raise ArchiveError(f"checkpoint tensors mismatch (missing={sorted(missing)[:3]}, extra={sorted(extra)[:3]})")
    for name, value in tensors.items():
        target = params[name].data if name in params else buffers[name]
        if target.shape != value.shape:
            raise ArchiveError(f"shape mismatch for {name}: {value.shape} vs {target.shape}")
        target[...] = value
    return model
