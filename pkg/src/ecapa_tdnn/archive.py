"""Named-tensor archives: ``manifest.json`` plus a little-endian float32 blob.

Used for checkpoints, embedding archives and feature dumps alike.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


class ArchiveError(ValueError):
    pass


def save_archive(path, tensors: dict[str, np.ndarray], meta: dict | None = None, kind: str = "tensors") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name, arr in tensors.items():
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
            fh.write(buf)
            offset += len(buf)
    manifest = {"kind": kind, "version": FORMAT_VERSION, "dtype": "float32-le",
                "meta": meta or {}, "tensors": entries}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_archive(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise ArchiveError(f"no archive manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"unreadable archive manifest at {path}: {exc}") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise ArchiveError(f"unsupported archive version {manifest.get('version')} (expected {FORMAT_VERSION})")
    if kind is not None and manifest.get("kind") != kind:
        raise ArchiveError(f"expected a {kind!r} archive, found {manifest.get('kind')!r}")
    try:
        blob = np.fromfile(path / BLOB, dtype="<f4")
    except FileNotFoundError:
        raise ArchiveError(f"missing tensor data {path / BLOB}") from None
    tensors = {}
    for e in manifest["tensors"]:
        start = e["offset"] // 4
        n = int(np.prod(e["shape"], dtype=np.int64))
        if start + n > blob.size:
            raise ArchiveError(f"tensor {e['name']!r} runs past the end of {BLOB} (truncated archive?)")
        tensors[e["name"]] = blob[start:start + n].reshape(e["shape"]).astype(np.float32)
    return tensors, manifest["meta"]
