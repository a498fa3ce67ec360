"""Small dense tanh networks plus the feature encoding they all consume.

The same MLP machinery backs every learned dynamics component: tire-force
heads, full-state derivative nets, and residual correctors.  Parameters
are kept in a flat named ParameterSet so the optimizer and checkpoints
see one uniform dictionary; MlpParams is just the structured view.
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
    stack,
    tanh,
)

__all__ = [
    "MlpParams",
    "init_params",
    "param_count",
    "register_params",
    "bind_params",
    "mlp_forward",
    "encode_features",
    "FEATURE_NAMES",
]

#: order of the network inputs; friction is deliberately not a feature.
FEATURE_NAMES = (
    "vx",
    "vy",
    "yaw_rate",
    "wheel_speed",
    "steering",
    "motor_current",
    "slip_ratio",
    "slip_angle_front",
    "slip_angle_rear",
)


@dataclass
class MlpParams:
    """Structured view of one network: layer dims plus (weight, bias) pairs.

    Weights are (fan_in, fan_out); biases are (fan_out,).  Hidden layers
    use tanh, the output layer is linear.
    """

    dims: tuple[int, ...]
    layers: list[tuple[Tensor, Tensor]]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)


def param_count(dims: tuple[int, ...]) -> int:
    return sum((dims[i] + 1) * dims[i + 1] for i in range(len(dims) - 1))


def init_params(dims: tuple[int, ...], seed: int) -> MlpParams:
    """Xavier-uniform weights, zero biases, final layer damped by 0.01.

    The damping keeps freshly initialized models close to zero output so
    filters built on them start near the trivial dynamics instead of
    injecting large random forces.
    """
    if len(dims) < 2:
        raise ShapeError(f"an MLP needs at least two dims, got {dims}")
    rng = np.random.default_rng(seed)
    layers: list[tuple[Tensor, Tensor]] = []
    last = len(dims) - 2
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        if i == last:
            w = w * 0.01
        layers.append((Tensor(w), Tensor(np.zeros(fan_out))))
    return MlpParams(tuple(dims), layers)


def register_params(ps: ParameterSet, prefix: str, mlp: MlpParams) -> None:
    """Store an MLP's arrays in a ParameterSet under ``prefix.w{i}/b{i}``."""
    for i, (w, b) in enumerate(mlp.layers):
        ps.add(f"{prefix}.w{i}", w.values)
        ps.add(f"{prefix}.b{i}", b.values)


def bind_params(
    mapping: dict[str, Tensor], prefix: str, dims: tuple[int, ...]
) -> MlpParams:
    """Rebuild the structured view from a name->Tensor binding."""
    layers = []
    for i in range(len(dims) - 1):
        layers.append((mapping[f"{prefix}.w{i}"], mapping[f"{prefix}.b{i}"]))
    return MlpParams(tuple(dims), layers)


def mlp_forward(params: MlpParams, features) -> Tensor:
    """Run the network on (..., fan_in) features; returns (..., fan_out)."""
    x = as_tensor(features)
    if x.shape[-1] != params.dims[0]:
        raise ShapeError(
            f"network expects {params.dims[0]} features, got shape {x.shape}"
        )
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
    n_layers = len(params.layers)
    for i, (w, b) in enumerate(params.layers):
        x = add(matmul(x, w), b)
        if i < n_layers - 1:
            x = tanh(x)
    if squeeze:
        x = reshape(x, (x.shape[-1],))
    return x


def encode_features(state, control, slip, scales: np.ndarray) -> Tensor:
    """Assemble and normalize the 9 network inputs.

    ``state`` is (..., 4) or (..., 5) — a friction component, when present,
    is not part of the features.  ``scales`` holds one positive constant
    per feature; inputs are divided by it so the network sees O(1) values.
    """
    state = as_tensor(state)
    control = as_tensor(control)
    scales = np.asarray(scales, dtype=np.float64)
    if scales.shape != (9,):
        raise ShapeError(f"need 9 feature scales, got shape {scales.shape}")
    if np.any(scales <= 0):
        raise ShapeError("feature scales must be positive")
    feats = stack(
        [
            state[..., 0],
            state[..., 1],
            state[..., 2],
            state[..., 3],
            control[..., 0],
            control[..., 1],
            slip.ratio,
            slip.angle_front,
            slip.angle_rear,
        ],
        axis=-1,
    )
    return hadamard(feats, 1.0 / scales)
