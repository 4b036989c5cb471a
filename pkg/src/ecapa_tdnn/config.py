"""Run configuration files (JSON) and run manifests."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .features import SpecAugmentConfig
from .model import ModelConfig, apply_ablation
from .train import AAMConfig, LRSchedule, TrainConfig


@dataclass
class RunConfig:
    """Everything ``train`` needs. Unknown keys in a config file are rejected.

    ``preset`` is "desk" (small CPU model, short schedule) or "reference"
    (C=512/1024, batch 128, 130k-iteration cycles).
    """
    preset: str = "desk"
    channels: int | None = None
    variant: str | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    seed: int = 0
    corpus: str | None = None

    @classmethod
    def load(cls, path) -> "RunConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def model_config(self) -> ModelConfig:
        if self.preset == "desk":
            cfg = ModelConfig.desk(self.channels or 64)
        elif self.preset == "reference":
            cfg = ModelConfig.reference(self.channels or 512)
        else:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.model:
            cfg = ModelConfig.from_dict({**cfg.to_dict(), **self.model})
        return apply_ablation(cfg, self.variant) if self.variant else cfg

    def train_config(self) -> TrainConfig:
        base = TrainConfig.reference() if self.preset == "reference" else TrainConfig()
        t = dict(self.train)
        if "schedule" in t:
            t["schedule"] = dataclasses.replace(base.schedule, **t["schedule"])
        if "aam" in t:
            t["aam"] = AAMConfig(**t["aam"])
        if "spec_augment" in t:
            t["spec_augment"] = SpecAugmentConfig(**t["spec_augment"]) if t["spec_augment"] is not None else None
        return dataclasses.replace(base, **t)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def run_manifest(config: dict, seeds: dict, argv: list[str] | None = None) -> dict:
    return {
        "config_hash": config_hash(config),
        "config": config,
        "seeds": seeds,
        "version": __version__,
        "command": list(sys.argv if argv is None else argv),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def finish_manifest(manifest: dict, out_dir=None) -> dict:
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


# re-exported for callers building schedules from files
__all__ = ["RunConfig", "LRSchedule", "config_hash", "run_manifest", "finish_manifest"]
