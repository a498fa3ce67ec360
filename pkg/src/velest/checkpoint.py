"""Parameter checkpoints: a versioned JSON manifest of named tensors.

Values are stored row-major as JSON numbers.  Python's float repr is the
shortest round-tripping decimal, so save → load reproduces every tensor
bit-for-bit; two checkpoints of identical parameters are byte-identical
files (key order follows parameter insertion order).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import ParameterSet

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "CHECKPOINT_VERSION"]

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file missing, malformed, or from an unknown version."""


def save_checkpoint(params: ParameterSet, path: str | Path, meta: dict | None = None) -> None:
    """Write the parameter set (and optional JSON-safe metadata)."""
    manifest = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": {
            name: {
                "shape": list(values.shape),
                "values": [float(v) for v in values.ravel()],
            }
            for name, values in params.items()
        },
    }
    Path(path).write_text(json.dumps(manifest, indent=1) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, dict]:
    """Read a manifest back into a ParameterSet, validating shape and version."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: not valid JSON ({e})") from None
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version {version!r} unsupported (this build reads {CHECKPOINT_VERSION})"
        )
    tensors = manifest.get("tensors")
    if not isinstance(tensors, dict):
        raise CheckpointError(f"{path}: missing 'tensors' table")
    params = ParameterSet()
    for name, entry in tensors.items():
        try:
            shape = tuple(int(d) for d in entry["shape"])
            values = np.array(entry["values"], dtype=np.float64).reshape(shape)
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: tensor {name!r} malformed ({e})") from None
        if not np.isfinite(values).all():
            raise CheckpointError(f"{path}: tensor {name!r} has non-finite values")
        params.add(name, values)
    return params, manifest.get("meta", {})
