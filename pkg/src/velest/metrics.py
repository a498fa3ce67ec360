"""Estimation-quality metrics and report files.

All three headline numbers reduce the same per-timestep scalar: the
state-weighted error at that timestep, pooled over every sequence.  MSE
uses the weighted squared error, MAE the weighted absolute error, and
the 99%-AE is the linear-interpolated 99th percentile of the weighted
absolute error — a worst-case measure that ignores the final 1% of
outliers.  Weighting happens per timestep *before* aggregation, so the
percentile is taken over physically meaningful scalars.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

STATE_COLUMNS = ("vx", "vy", "yaw_rate", "wheel_speed")

__all__ = ["MetricsReport", "EvalConfig", "compute_metrics", "emit_report", "load_report"]


@dataclass
class EvalConfig:
    """Evaluation slicing: window length and optional warm-up discard."""

    window: int = 1000  # 10 s at 100 Hz
    burn_in_samples: int = 0  # drop this many samples from each sequence head

    def __post_init__(self):
        if self.window < 2:
            raise ValueError(f"window must be >= 2, got {self.window}")
        if not 0 <= self.burn_in_samples < self.window:
            raise ValueError(
                f"burn_in_samples must lie in [0, window), got {self.burn_in_samples}"
            )


@dataclass
class MetricsReport:
    mse: float
    mae: float
    ae99: float
    per_state_mse: np.ndarray  # (4,) unweighted
    per_state_mae: np.ndarray  # (4,) unweighted
    model_id: str = ""
    dataset_id: str = ""
    sequence_count: int = 0

    def __post_init__(self):
        values = [self.mse, self.mae, self.ae99]
        if not all(np.isfinite(v) for v in values) or self.mse < 0:
            raise ValueError(f"metrics must be finite and non-negative, got {values}")

    def row(self) -> dict:
        out = {
            "model": self.model_id,
            "dataset": self.dataset_id,
            "sequences": self.sequence_count,
            "mse": self.mse,
            "mae": self.mae,
            "ae99": self.ae99,
        }
        for j, name in enumerate(STATE_COLUMNS):
            out[f"mse_{name}"] = float(self.per_state_mse[j])
            out[f"mae_{name}"] = float(self.per_state_mae[j])
        return out


def _pool_sequences(
    estimates: Sequence[np.ndarray], truths: Sequence[np.ndarray], burn_in: int
) -> np.ndarray:
    """Stack per-sequence error arrays into one (N, 4) pool."""
    if len(estimates) == 0:
        raise ValueError("no sequences to evaluate")
    if len(estimates) != len(truths):
        raise ValueError(f"{len(estimates)} estimate sequences vs {len(truths)} truth sequences")
    pools = []
    for k, (est, tru) in enumerate(zip(estimates, truths)):
        est = np.asarray(est, dtype=np.float64)[..., :4]
        tru = np.asarray(tru, dtype=np.float64)
        if est.shape != tru.shape:
            raise ValueError(f"sequence {k}: estimate shape {est.shape} vs truth {tru.shape}")
        if est.shape[0] <= burn_in:
            raise ValueError(f"sequence {k} shorter than burn-in {burn_in}")
        pools.append((est - tru)[burn_in:])
    return np.concatenate(pools, axis=0)


def compute_metrics(
    estimates: Sequence[np.ndarray],
    truths: Sequence[np.ndarray],
    state_weights: np.ndarray,
    model_id: str = "",
    dataset_id: str = "",
    burn_in: int = 0,
) -> MetricsReport:
    """Weighted error aggregates over a set of aligned sequences.

    ``estimates`` and ``truths`` are matching lists of (T_k, 4) arrays
    (estimates may be (T_k, 5); the friction column is ignored).  The
    per-timestep weighted error pools across sequences, so the result is
    invariant to sequence order.
    """
    w = np.asarray(state_weights, dtype=np.float64)
    if w.shape != (4,) or (w < 0).any():
        raise ValueError(f"state_weights must be 4 non-negative values, got {w}")
    err = _pool_sequences(estimates, truths, burn_in)
    weighted_sq = (err**2) @ w
    weighted_abs = np.abs(err) @ w
    return MetricsReport(
        mse=float(weighted_sq.mean()),
        mae=float(weighted_abs.mean()),
        ae99=float(np.percentile(weighted_abs, 99.0, method="linear")),
        per_state_mse=(err**2).mean(axis=0),
        per_state_mae=np.abs(err).mean(axis=0),
        model_id=model_id,
        dataset_id=dataset_id,
        sequence_count=len(estimates),
    )


_REPORT_COLUMNS = ["model", "dataset", "sequences", "mse", "mae", "ae99"] + [
    f"{kind}_{name}" for name in STATE_COLUMNS for kind in ("mse", "mae")
]


def emit_report(reports: Sequence[MetricsReport], path: str | Path, format: str = "csv") -> None:
    """Write one row per (model, dataset) as CSV or JSON.

    Column order is fixed; floats are serialized losslessly (shortest
    round-trip decimal), so re-reading recovers the exact values.
    """
    if not reports:
        raise ValueError("no reports to emit")
    if format not in ("csv", "json"):
        raise ValueError(f"format must be 'csv' or 'json', got {format!r}")
    path = Path(path)
    rows = [r.row() for r in reports]
    if format == "json":
        payload = [{k: row[k] for k in _REPORT_COLUMNS} for row in rows]
        path.write_text(json.dumps(payload, indent=1) + "\n")
        return
    lines = [",".join(_REPORT_COLUMNS)]
    for row in rows:
        cells = []
        for col in _REPORT_COLUMNS:
            v = row[col]
            cells.append(repr(float(v)) if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


def load_report(path: str | Path) -> list[dict]:
    """Read back an emitted report (either format) as a list of row dicts."""
    path = Path(path)
    text = path.read_text()
    if text.lstrip().startswith("["):
        return json.loads(text)
    lines = [ln for ln in text.splitlines() if ln]
    header = lines[0].split(",")
    out = []
    for ln in lines[1:]:
        cells = ln.split(",")
        row: dict = {}
        for key, cell in zip(header, cells):
            if key in ("model", "dataset"):
                row[key] = cell
            elif key == "sequences":
                row[key] = int(cell)
            else:
                row[key] = float(cell)
        out.append(row)
    return out
