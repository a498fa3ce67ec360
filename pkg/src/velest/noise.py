"""Learnable process and measurement covariances for the filter.

Covariances are parameterized through their lower-triangular square roots
so they stay positive semi-definite under any parameter values; a small
fixed floor keeps them strictly positive definite.  Two flavors exist:

* homoscedastic — the packed triangle entries are the parameters;
* heteroscedastic — the entries are an affine map of the (scaled) current
  state estimate, so uncertainty can grow in, say, fast corners.

A heteroscedastic model with zero weights reproduces the homoscedastic
one exactly, which is also how it is initialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ParameterSet,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    hadamard,
    matmul,
    reshape,
    transpose,
)

__all__ = [
    "COVARIANCE_FLOOR",
    "NoiseModel",
    "tril_count",
    "default_process_diag",
    "default_measurement_diag",
]

#: added to every covariance diagonal; the definiteness floor.
COVARIANCE_FLOOR = 1e-7

_SCATTER_CACHE: dict[int, np.ndarray] = {}


def tril_count(n: int) -> int:
    return n * (n + 1) // 2


def _scatter_matrix(n: int) -> np.ndarray:
    """(tril_count, n*n) 0/1 map from packed row-major entries to a matrix."""
    m = _SCATTER_CACHE.get(n)
    if m is None:
        m = np.zeros((tril_count(n), n * n))
        k = 0
        for i in range(n):
            for j in range(i + 1):
                m[k, i * n + j] = 1.0
                k += 1
        _SCATTER_CACHE[n] = m
    return m


def _diag_positions(n: int) -> list[int]:
    return [i * (i + 1) // 2 + i for i in range(n)]


def packed_from_diag(diag: np.ndarray) -> np.ndarray:
    """Packed triangle entries for a diagonal square root."""
    n = len(diag)
    packed = np.zeros(tril_count(n))
    packed[_diag_positions(n)] = diag
    return packed


def default_process_diag(n_state: int) -> np.ndarray:
    """Square-root diagonal for the process noise: 0.1 per motion state,
    0.01 for a friction component (it moves only as fast as the road)."""
    d = np.full(n_state, 0.1)
    if n_state == 5:
        d[4] = 0.01
    return d


def default_measurement_diag() -> np.ndarray:
    """Square-root diagonal per sensor: accelerometers are the noisy ones."""
    return np.array([0.5, 0.5, 0.05, 0.1])


def _expand_lower(entries: Tensor, n: int) -> Tensor:
    """(..., tril_count) packed entries -> (..., n, n) lower triangle."""
    scatter = _scatter_matrix(n)
    lead = entries.shape[:-1]
    row = reshape(entries, lead + (1, entries.shape[-1]))
    flat = matmul(row, scatter)
    return reshape(flat, lead + (n, n))


@dataclass
class NoiseModel:
    """Metadata tying noise parameters in a ParameterSet to covariance ops.

    ``state_scales`` normalizes the state estimate before the affine map
    in the heteroscedastic case (same constants the feature encoder uses
    for the motion states, 1.0 for friction).
    """

    n_state: int
    n_meas: int
    heteroscedastic: bool
    state_scales: np.ndarray
    prefix: str = "noise"

    def param_names(self) -> list[str]:
        names = []
        for part in ("process", "measurement"):
            if self.heteroscedastic:
                names += [f"{self.prefix}.{part}_w", f"{self.prefix}.{part}_b"]
            else:
                names += [f"{self.prefix}.{part}_l"]
        return names

    def register(
        self,
        ps: ParameterSet,
        process_diag: np.ndarray | None = None,
        measurement_diag: np.ndarray | None = None,
    ) -> None:
        if process_diag is None:
            process_diag = default_process_diag(self.n_state)
        if measurement_diag is None:
            measurement_diag = default_measurement_diag()
        if len(process_diag) != self.n_state or len(measurement_diag) != self.n_meas:
            raise ShapeError("noise diagonal lengths do not match state/meas dims")
        for part, diag, n in (
            ("process", np.asarray(process_diag, float), self.n_state),
            ("measurement", np.asarray(measurement_diag, float), self.n_meas),
        ):
            packed = packed_from_diag(diag)
            if self.heteroscedastic:
                ps.add(f"{self.prefix}.{part}_w", np.zeros((self.n_state, tril_count(n))))
                ps.add(f"{self.prefix}.{part}_b", packed)
            else:
                ps.add(f"{self.prefix}.{part}_l", packed)

    def _entries(self, mapping: dict[str, Tensor], part: str, state_estimate) -> Tensor:
        if not self.heteroscedastic:
            return mapping[f"{self.prefix}.{part}_l"]
        w = mapping[f"{self.prefix}.{part}_w"]
        b = mapping[f"{self.prefix}.{part}_b"]
        x = as_tensor(state_estimate)
        if x.shape[-1] != self.n_state:
            raise ShapeError(
                f"noise model expects state dim {self.n_state}, got {x.shape}"
            )
        scaled = hadamard(x, 1.0 / self.state_scales)
        lead = scaled.shape[:-1]
        row = reshape(scaled, lead + (1, self.n_state))
        ent = add(matmul(row, w), b)
        return reshape(ent, lead + (ent.shape[-1],))

    def _cov(self, mapping, part: str, n: int, state_estimate) -> Tensor:
        entries = self._entries(mapping, part, state_estimate)
        low = _expand_lower(entries, n)
        cov = matmul(low, transpose(low))
        return add(cov, COVARIANCE_FLOOR * np.eye(n))

    def process_covariance(self, mapping: dict[str, Tensor], state_estimate) -> Tensor:
        """SPD (..., n_state, n_state); strictly positive by the floor."""
        return self._cov(mapping, "process", self.n_state, state_estimate)

    def measurement_covariance(self, mapping: dict[str, Tensor], state_estimate) -> Tensor:
        """SPD (..., n_meas, n_meas) for the sensor vector."""
        return self._cov(mapping, "measurement", self.n_meas, state_estimate)

    def restrict_to_base_state(
        self, mapping: dict[str, Tensor], frozen_friction: float
    ) -> tuple["NoiseModel", dict[str, Tensor]]:
        """Project a friction-augmented (5-state) noise model onto 4 states.

        Row-major packing makes the first tril_count(4) process entries
        exactly the square root of the 4x4 marginal covariance.  For the
        heteroscedastic map the friction input column is folded into the
        bias at the frozen value, which reproduces the full model's output
        exactly at that friction.
        """
        if self.n_state != 5:
            raise ShapeError("restriction only applies to 5-state noise models")
        sub = NoiseModel(
            n_state=4,
            n_meas=self.n_meas,
            heteroscedastic=self.heteroscedastic,
            state_scales=self.state_scales[:4],
            prefix=self.prefix,
        )
        k4 = tril_count(4)
        out: dict[str, Tensor] = {}
        mu_scaled = frozen_friction / float(self.state_scales[4])
        for part, n in (("process", 4), ("measurement", self.n_meas)):
            keep = k4 if part == "process" else tril_count(self.n_meas)
            if self.heteroscedastic:
                w = mapping[f"{self.prefix}.{part}_w"]
                b = mapping[f"{self.prefix}.{part}_b"]
                out[f"{self.prefix}.{part}_w"] = w[:4, :keep]
                out[f"{self.prefix}.{part}_b"] = add(
                    b[:keep], w[4, :keep] * mu_scaled
                )
            else:
                out[f"{self.prefix}.{part}_l"] = mapping[f"{self.prefix}.{part}_l"][:keep]
        return sub, out
