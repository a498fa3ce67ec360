"""Layered run configuration: TOML file, environment, command line.

One TOML file carries every knob, one section per subsystem.  Overrides
stack in increasing precedence: built-in defaults, the file, environment
variables, explicit CLI values.  Environment variables use the prefix
``VELEST_`` with ``__`` between path parts (``VELEST_TRAIN__LR=1e-3``
sets ``train.lr``); values parse as TOML literals, with a bare-string
fallback so ``VELEST_MODEL__KIND=nn`` works unquoted.

Unknown keys are rejected with their full path, and every value passes
the owning dataclass's own validation.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .data import SimConfig
from .dynamics import PacejkaParams, VehicleParams, default_pacejka
from .metrics import EvalConfig
from .training import TrainConfig
from .ukf import ModelSpec, UkfConfig

__all__ = [
    "ConfigError",
    "ModelConfig",
    "PathsConfig",
    "RunConfig",
    "load_config",
    "dump_config",
    "model_spec_from",
    "ENV_PREFIX",
]

ENV_PREFIX = "VELEST_"


class ConfigError(ValueError):
    """Bad configuration; message names the offending key path."""


@dataclass
class ModelConfig:
    kind: str = "nntf"
    heteroscedastic: bool = False
    estimate_friction: bool = True
    seed: int = 0
    v_eps: float = 0.1
    force_scale: float = 30.0

    def __post_init__(self):
        if self.v_eps <= 0:
            raise ValueError(f"v_eps must be positive, got {self.v_eps}")


@dataclass
class PathsConfig:
    dataset: str = ""
    checkpoint: str = ""
    report: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    pacejka: PacejkaParams = field(default_factory=default_pacejka)
    ukf: UkfConfig = field(default_factory=UkfConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def model_spec_from(cfg: RunConfig) -> ModelSpec:
    """Assemble the model description a trainer or filter consumes.

    Only the friction-scaled tire model consumes an augmented friction
    state, so ``estimate_friction`` is effective only for that kind; the
    flag is ignored for the others rather than failing, letting one
    config drive a model sweep.
    """
    return ModelSpec(
        kind=cfg.model.kind,
        vehicle=cfg.vehicle,
        pacejka=cfg.pacejka,
        force_scale=cfg.model.force_scale,
        heteroscedastic=cfg.model.heteroscedastic,
        estimate_friction=cfg.model.estimate_friction and cfg.model.kind == "nntf",
        v_eps=cfg.model.v_eps,
        seed=cfg.model.seed,
    )


# ---------------------------------------------------------------------------
# layered loading
# ---------------------------------------------------------------------------


def _merge(base: dict, extra: Mapping) -> dict:
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def _env_tables(env: Mapping[str, str]) -> dict:
    out: dict = {}
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX) :].split("__")]
        if not all(parts):
            raise ConfigError(f"malformed variable name {name}")
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw  # unquoted string
        table = out
        for part in parts[:-1]:
            table = table.setdefault(part, {})
        table[parts[-1]] = value
    return out


def _override_tables(overrides: Mapping[str, object]) -> dict:
    out: dict = {}
    for path, value in overrides.items():
        parts = path.split(".")
        table = out
        for part in parts[:-1]:
            table = table.setdefault(part, {})
        table[parts[-1]] = value
    return out


def _coerce(value, default, path: str):
    """Check ``value`` against the type of the field's default."""
    if default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if is_dataclass(default):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{path}: expected a table")
        return _fill(type(default), default, value, path)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, np.ndarray):
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"{path}: expected a list of numbers, got {value!r}")
        return np.array(value, dtype=np.float64)
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _coerce_friction(value, path: str):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, list) and value and all(
        isinstance(pair, (list, tuple)) and len(pair) == 2 for pair in value
    ):
        return [(float(a), float(b)) for a, b in value]
    raise ConfigError(f"{path}: expected a number or [[t, value], ...] schedule")


def _fill(cls, default_obj, table: Mapping, path: str):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"unknown key {path}.{key}")
        key_path = f"{path}.{key}"
        if cls is SimConfig and key == "friction":
            kwargs[key] = _coerce_friction(value, key_path)
        else:
            kwargs[key] = _coerce(value, getattr(default_obj, key), key_path)
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None


def load_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, object] | None = None,
) -> RunConfig:
    """Build a RunConfig from the layered sources.

    ``overrides`` maps dotted key paths to already-typed values (the CLI
    layer); it wins over environment, which wins over the file.
    """
    merged: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        try:
            _merge(merged, tomllib.loads(text))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    if env is not None:
        _merge(merged, _env_tables(env))
    if overrides:
        _merge(merged, _override_tables(overrides))

    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    kwargs = {}
    for key, value in merged.items():
        if key not in known:
            raise ConfigError(f"unknown key {key}")
        if not isinstance(value, Mapping):
            raise ConfigError(f"{key}: expected a table")
        kwargs[key] = _fill(
            type(getattr(defaults, key)), getattr(defaults, key), value, key
        )
    return RunConfig(**kwargs)


# ---------------------------------------------------------------------------
# canonical dump
# ---------------------------------------------------------------------------


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isinf(v) or math.isnan(v):
            raise ConfigError(f"cannot serialize non-finite value {v}")
        text = repr(v)
        return text if ("." in text or "e" in text or "E" in text) else text + ".0"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, np.ndarray):
        return "[" + ", ".join(_format_value(float(v)) for v in value) + "]"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {value!r}")


def _dump_table(obj, path: str, lines: list[str]) -> None:
    scalars = []
    subtables = []
    for f in fields(obj):
        value = getattr(obj, f.name)
        if is_dataclass(value):
            subtables.append((f.name, value))
        elif value is None:
            continue
        else:
            scalars.append((f.name, value))
    if scalars:
        lines.append(f"[{path}]")
        for name, value in scalars:
            lines.append(f"{name} = {_format_value(value)}")
        lines.append("")
    for name, value in subtables:
        _dump_table(value, f"{path}.{name}", lines)


def dump_config(cfg: RunConfig) -> str:
    """Canonical TOML text: fixed section order, lossless floats."""
    lines: list[str] = []
    for f in fields(RunConfig):
        _dump_table(getattr(cfg, f.name), f.name, lines)
    return "\n".join(lines).rstrip("\n") + "\n"
