"""Two-phase training: one-step dynamics pretraining, then filter fine-tuning.

Pretraining fits the dynamics alone by integrating one sample ahead on
ground-truth states.  Fine-tuning then unrolls the full filter over
contiguous sequence windows and backpropagates the weighted estimation
loss through every predict/update, adapting dynamics and noise together
— the phase that makes the model a good *filter* model rather than just
a good one-step predictor.

An epoch is one optimizer step on one freshly drawn batch.  Each epoch
re-tiles the dataset into non-overlapping windows at a random offset and
draws the batch from those tiles; tiles are processed in ascending row
order, so a fixed seed reproduces runs bit-for-bit regardless of worker
chunking.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import dynamics as dyn
from .autodiff import NonFiniteError, ParameterSet, Tape, Tensor, reduce_sum, square
from .data import SyncedDataset
from .ukf import (
    FilterDivergence,
    FilterRun,
    ModelSpec,
    UkfConfig,
    initial_belief,
    run_sequence,
)

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainingDiverged",
    "TrainResult",
    "weighted_state_loss",
    "adam_step",
    "one_step_pretrain",
    "ukf_finetune",
    "filter_windows",
    "write_history_csv",
    "TRAIN_STATE_WEIGHTS",
    "EVAL_STATE_WEIGHTS",
]

#: loss weights for [vx, vy, r, omega_s]: inverse variability of each state.
TRAIN_STATE_WEIGHTS = np.array([0.223, 0.506, 0.157, 0.114])

#: evaluation weights: wheel speed is a directly measured channel, so the
#: reported error zeroes it out.
EVAL_STATE_WEIGHTS = np.array([0.223, 0.506, 0.157, 0.0])

HISTORY_COLUMNS = ["epoch", "phase", "train_loss", "val_loss", "wall_time"]


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the offending epoch index."""

    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}{': ' + detail if detail else ''}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pretrain_epochs: int = 1000
    finetune_epochs: int = 1000
    batch_size: int = 256
    grad_clip: float = 10.0
    seq_len: int = 500
    seed: int = 0
    state_weights: np.ndarray = field(default_factory=lambda: TRAIN_STATE_WEIGHTS.copy())
    eval_omega_weight: float = 0.0
    friction_prior: float | None = None  # None: dataset truth, else this value
    freeze_noise: bool = False
    freeze_dynamics: bool = False
    val_interval: int = 25
    val_windows: int = 4
    checkpoint_interval: int = 0  # epochs between on_checkpoint calls; 0 disables
    divergence_tolerance: float = 0.10  # abort when more sequences than this diverge
    workers: int = 1  # gradient accumulation chunks (sequential, index order)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.seq_len < 2:
            raise ValueError(f"seq_len must be >= 2, got {self.seq_len}")
        w = np.asarray(self.state_weights, dtype=np.float64)
        if w.shape != (4,) or (w < 0).any():
            raise ValueError(f"state_weights must be 4 non-negative values, got {w}")
        self.state_weights = w

    def eval_weights(self) -> np.ndarray:
        w = self.state_weights.copy()
        w[3] = self.eval_omega_weight
        return w


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ParameterSet) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(
    params: ParameterSet,
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    trainable: set[str] | None = None,
) -> float:
    """One Adam update with global-norm gradient clipping.

    Returns the pre-clip global gradient norm over the trainable subset.
    """
    names = [k for k in params.names() if trainable is None or k in trainable]
    norm_sq = 0.0
    for k in names:
        g = grads[k]
        if g.shape != params[k].shape:
            raise ValueError(f"gradient for {k!r} has shape {g.shape}, want {params[k].shape}")
        norm_sq += float(np.sum(g * g))
    norm = float(np.sqrt(norm_sq))
    clip = 1.0
    if cfg.grad_clip > 0 and norm > cfg.grad_clip:
        clip = cfg.grad_clip / norm
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for k in names:
        g = grads[k] * clip
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = state.m[k] / (1 - b1**t)
        vhat = state.v[k] / (1 - b2**t)
        params[k] = params[k] - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    return norm


def weighted_state_loss(estimates, truths: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean over time, batch and states of weight_i * (estimate_i - truth_i)^2.

    ``estimates`` is a list of per-step mean Tensors shaped (..., n>=4);
    ``truths`` is (T, ..., 4).  Only the four motion states enter; an
    augmented friction component carries no loss.
    """
    truths = np.asarray(truths, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    steps = len(estimates)
    if truths.shape[0] != steps:
        raise ValueError(f"{steps} estimates vs {truths.shape[0]} truth rows")
    total = None
    for k, est in enumerate(estimates):
        err = est[..., :4] - truths[k]
        term = reduce_sum(square(err) * w)
        total = term if total is None else total + term
    denom = steps * 4 * int(np.prod(truths.shape[1:-1], dtype=np.int64))
    return total * (1.0 / denom)


@dataclass
class TrainResult:
    history: list[dict]
    final: ParameterSet
    best: ParameterSet
    best_val: float


def write_history_csv(history: list[dict], path: str | Path) -> None:
    """Persist a loss curve with a stable column order."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([
                row["epoch"], row["phase"], repr(float(row["train_loss"])),
                "" if np.isnan(row["val_loss"]) else repr(float(row["val_loss"])),
                repr(float(row["wall_time"])),
            ])


def _resolve_friction(cfg: TrainConfig, spec: ModelSpec, ds: SyncedDataset) -> np.ndarray:
    """Per-row friction used for pretraining inputs / rollout priors, (T,)."""
    if cfg.friction_prior is not None:
        return np.full(len(ds), float(cfg.friction_prior))
    if ds.friction is not None:
        return ds.friction.astype(np.float64)
    return np.full(len(ds), float(spec.pacejka.friction))


def _pair_derivative(spec: ModelSpec, mapping) -> Callable:
    """Model derivative on the training state (friction included if estimated)."""
    deriv = spec.derivative(mapping)
    if spec.estimate_friction:
        deriv = dyn.with_zero_friction_rate(deriv)
    return deriv


def _truth_states(ds: SyncedDataset) -> np.ndarray:
    if ds.truth is None:
        raise ValueError("dataset carries no ground-truth states")
    return ds.truth


def _maybe_checkpoint(cfg: TrainConfig, epoch: int, params: ParameterSet, hook) -> None:
    if hook is not None and cfg.checkpoint_interval > 0 and (
        epoch % cfg.checkpoint_interval == cfg.checkpoint_interval - 1
    ):
        hook(epoch, params)


# ---------------------------------------------------------------------------
# phase one: one-step prediction on ground truth
# ---------------------------------------------------------------------------


def one_step_pretrain(
    spec: ModelSpec,
    params: ParameterSet,
    train_ds: SyncedDataset,
    cfg: TrainConfig,
    val_ds: SyncedDataset | None = None,
    log: Callable[[str], None] | None = None,
    on_checkpoint: Callable[[int, ParameterSet], None] | None = None,
) -> TrainResult:
    """Fit the dynamics on (state_k, control_k) -> state_{k+1} pairs.

    Each epoch integrates one RK4 step from a freshly sampled batch of
    ground-truth states and takes an Adam step on the weighted mean
    squared error against the next ground-truth state.  Filter outputs
    are never consulted; only measured truth enters.
    """
    dt = 1.0 / train_ds.rate
    x = _truth_states(train_ds)
    u = train_ds.controls
    if spec.estimate_friction:
        x = np.concatenate([x, _resolve_friction(cfg, spec, train_ds)[:, None]], axis=1)
    pair_starts = train_ds.valid_window_starts(2)
    if len(pair_starts) < 1:
        raise ValueError("dataset too short for one-step pairs")
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState.for_params(params)
    trainable = {k for k in params.names() if not k.startswith("noise.")}
    history: list[dict] = []
    best = params.copy()
    best_val = float("inf")

    def eval_pairs(ds: SyncedDataset) -> float:
        xv = _truth_states(ds)
        if spec.estimate_friction:
            xv = np.concatenate([xv, _resolve_friction(cfg, spec, ds)[:, None]], axis=1)
        starts = ds.valid_window_starts(2)
        deriv = _pair_derivative(spec, params.untracked())
        pred = dyn.rk4_step(deriv, xv[starts], ds.controls[starts], dt)
        return weighted_state_loss([pred], xv[None, starts + 1, :4], cfg.state_weights).item()

    t0 = time.perf_counter()
    for epoch in range(cfg.pretrain_epochs):
        idx = rng.choice(pair_starts, size=min(cfg.batch_size, len(pair_starts)), replace=False)
        idx.sort()
        with Tape() as tape:
            bound = params.tracked(tape)
            deriv = _pair_derivative(spec, bound)
            pred = dyn.rk4_step(deriv, x[idx], u[idx], dt)
            loss = weighted_state_loss([pred], x[None, idx + 1, :4], cfg.state_weights)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDiverged(epoch)
            tape.backward(loss)
            grads = {k: tape.grad(t) for k, t in bound.items()}
        adam_step(params, grads, adam, cfg, trainable)
        row = {
            "epoch": epoch,
            "phase": "pretrain",
            "train_loss": loss_val,
            "val_loss": np.nan,
            "wall_time": time.perf_counter() - t0,
        }
        if val_ds is not None and cfg.val_interval > 0 and (
            epoch % cfg.val_interval == cfg.val_interval - 1
            or epoch == cfg.pretrain_epochs - 1
        ):
            row["val_loss"] = eval_pairs(val_ds)
            if row["val_loss"] < best_val:
                best_val = row["val_loss"]
                best = params.copy()
        history.append(row)
        _maybe_checkpoint(cfg, epoch, params, on_checkpoint)
        if log is not None and (epoch % 50 == 0 or epoch == cfg.pretrain_epochs - 1):
            log(f"pretrain epoch {epoch}: loss {loss_val:.6f}")
    if not np.isfinite(best_val):
        best = params.copy()
        best_val = history[-1]["train_loss"] if history else float("inf")
    return TrainResult(history=history, final=params, best=best, best_val=best_val)


# ---------------------------------------------------------------------------
# phase two: estimation loss through the filter
# ---------------------------------------------------------------------------


def _window_batch(
    ds: SyncedDataset, starts: np.ndarray, length: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack windows: controls (L,B,2), measurements (L,B,4), truth (L,B,4)."""
    idx = starts[None, :] + np.arange(length)[:, None]  # (L, B)
    return ds.controls[idx], ds.measurements[idx], _truth_states(ds)[idx]


def _rollout_loss(
    spec: ModelSpec,
    mapping: dict[str, Tensor],
    ds: SyncedDataset,
    starts: np.ndarray,
    cfg: TrainConfig,
    ukf_cfg: UkfConfig,
) -> Tensor:
    """Filter a batch of windows in lockstep; weighted loss on steps 1.."""
    u, y, truth = _window_batch(ds, starts, cfg.seq_len)
    bundle = spec.bind(mapping)
    prior = _resolve_friction(cfg, spec, ds)[starts] if spec.estimate_friction else None
    belief = initial_belief(y[0], ukf_cfg, friction_prior=prior)
    run = run_sequence(bundle, belief, u, y, 1.0 / ds.rate, ukf_cfg)
    return weighted_state_loss(run.means[1:], truth[1:], cfg.state_weights)


def ukf_finetune(
    spec: ModelSpec,
    params: ParameterSet,
    train_ds: SyncedDataset,
    cfg: TrainConfig,
    ukf_cfg: UkfConfig | None = None,
    val_ds: SyncedDataset | None = None,
    log: Callable[[str], None] | None = None,
    on_checkpoint: Callable[[int, ParameterSet], None] | None = None,
) -> TrainResult:
    """Backpropagate the estimation loss through full filter rollouts.

    Dynamics and noise parameters adapt jointly unless frozen.  Each
    epoch tiles the dataset into non-overlapping seq_len windows at a
    random offset, draws a batch of tiles, and accumulates gradients over
    ``cfg.workers`` chunks in window-index order.  A chunk whose rollout
    goes non-finite is dropped; when more than ``divergence_tolerance``
    of the batch diverges, training aborts with the epoch index.
    """
    if ukf_cfg is None:
        ukf_cfg = UkfConfig()
    if not len(train_ds.valid_window_starts(cfg.seq_len)):
        raise ValueError(f"no segment of the dataset fits a {cfg.seq_len}-sample window")
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState.for_params(params)
    trainable = set(params.names())
    if cfg.freeze_noise:
        trainable = {k for k in trainable if not k.startswith("noise.")}
    if cfg.freeze_dynamics:
        trainable = {k for k in trainable if k.startswith("noise.")}
    if not trainable:
        raise ValueError("both dynamics and noise frozen: nothing to train")
    history: list[dict] = []
    best = params.copy()
    best_val = float("inf")

    val_starts = None
    if val_ds is not None:
        tiled = val_ds.window_starts_tiled(cfg.seq_len)
        if len(tiled):
            val_starts = tiled[: cfg.val_windows]

    t0 = time.perf_counter()
    for epoch in range(cfg.finetune_epochs):
        offset = int(rng.integers(0, cfg.seq_len))
        tiles = train_ds.window_starts_tiled(cfg.seq_len, offset)
        if not len(tiles):
            tiles = train_ds.window_starts_tiled(cfg.seq_len)
        n_batch = min(cfg.batch_size, len(tiles))
        starts = rng.choice(tiles, size=n_batch, replace=False)
        starts.sort()
        chunks = np.array_split(starts, max(1, min(cfg.workers, n_batch)))
        grads: dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in params.items()}
        loss_num = 0.0
        ok_count = 0
        diverged = 0
        for chunk in chunks:
            if len(chunk) == 0:
                continue
            try:
                with Tape() as tape:
                    bound = params.tracked(tape)
                    loss = _rollout_loss(spec, bound, train_ds, chunk, cfg, ukf_cfg)
                    chunk_val = loss.item()
                    if not np.isfinite(chunk_val):
                        raise NonFiniteError("rollout loss is not finite")
                    tape.backward(loss)
                    chunk_grads = {k: tape.grad(t) for k, t in bound.items()}
            except (NonFiniteError, FilterDivergence):
                diverged += len(chunk)
                continue
            loss_num += chunk_val * len(chunk)
            ok_count += len(chunk)
            for k in grads:
                grads[k] += chunk_grads[k] * len(chunk)
        if diverged > cfg.divergence_tolerance * n_batch or ok_count == 0:
            raise TrainingDiverged(epoch, f"{diverged}/{n_batch} sequences non-finite")
        loss_val = loss_num / ok_count
        for k in grads:
            grads[k] /= ok_count
        adam_step(params, grads, adam, cfg, trainable)
        row = {
            "epoch": epoch,
            "phase": "finetune",
            "train_loss": loss_val,
            "val_loss": np.nan,
            "wall_time": time.perf_counter() - t0,
        }
        if val_starts is not None and cfg.val_interval > 0 and (
            epoch % cfg.val_interval == cfg.val_interval - 1
            or epoch == cfg.finetune_epochs - 1
        ):
            val_loss = _rollout_loss(
                spec, params.untracked(), val_ds, val_starts, cfg, ukf_cfg
            ).item()
            row["val_loss"] = val_loss
            if val_loss < best_val:
                best_val = val_loss
                best = params.copy()
        history.append(row)
        _maybe_checkpoint(cfg, epoch, params, on_checkpoint)
        if log is not None and (epoch % 20 == 0 or epoch == cfg.finetune_epochs - 1):
            log(f"finetune epoch {epoch}: loss {loss_val:.6f}")
    if not np.isfinite(best_val):
        best = params.copy()
        best_val = history[-1]["train_loss"] if history else float("inf")
    return TrainResult(history=history, final=params, best=best, best_val=best_val)


# ---------------------------------------------------------------------------
# batched inference
# ---------------------------------------------------------------------------


def filter_windows(
    spec: ModelSpec,
    params: ParameterSet,
    ds: SyncedDataset,
    window: int,
    ukf_cfg: UkfConfig | None = None,
    friction_prior: float | None = None,
    frozen_friction: float | None = None,
    measurement_params: ParameterSet | None = None,
    collect_covs: bool = False,
) -> tuple[FilterRun, np.ndarray | None, np.ndarray]:
    """Run inference over non-overlapping windows, batched in lockstep.

    Returns the FilterRun (per-step means shaped (W, n)), the matching
    truth array (L, W, 4) when the dataset has truth, and the window
    start indices.  ``frozen_friction`` swaps in the pinned-friction
    4-state view of a friction-estimating model; ``measurement_params``
    evaluates the measurement side under a different parameter set
    (mixed-model studies).
    """
    if ukf_cfg is None:
        ukf_cfg = UkfConfig()
    starts = ds.window_starts_tiled(window)
    if len(starts) < 1:
        raise ValueError(f"no segment of the dataset fits a {window}-sample window")
    idx = starts[None, :] + np.arange(window)[:, None]
    u, y = ds.controls[idx], ds.measurements[idx]
    truth = ds.truth[idx] if ds.truth is not None else None
    mapping = params.untracked()
    meas_mapping = None if measurement_params is None else measurement_params.untracked()
    if frozen_friction is not None:
        bundle = spec.bind_frozen_friction(mapping, frozen_friction)
        prior = None
    else:
        bundle = spec.bind(mapping, meas_mapping)
        prior = friction_prior if spec.estimate_friction else None
        if spec.estimate_friction and prior is None:
            prior = float(spec.pacejka.friction)
    belief = initial_belief(y[0], ukf_cfg, friction_prior=prior)
    run = run_sequence(bundle, belief, u, y, 1.0 / ds.rate, ukf_cfg, collect_covs)
    return run, truth, starts
