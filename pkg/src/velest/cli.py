"""Command-line entry point.

Subcommands cover the whole workflow: simulate a dataset, pretrain and
fine-tune a model, run the filter, score estimates, check gradients, and
run the two standard studies (mixed predict/update models, sequence-
length sweep).  Every command takes ``--config`` for the TOML file and
``--seed`` to pin all randomness; individual flags override both.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import ParameterSet, grad_check
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    ModelConfig,
    RunConfig,
    load_config,
    model_spec_from,
)
from .data import LogFormatError, SimConfig, SyncedDataset, simulate_dataset, split_dataset
from .dynamics import MagicFormula, PacejkaParams, VehicleParams
from .metrics import MetricsReport, compute_metrics, emit_report
from .training import (
    TrainingDiverged,
    filter_windows,
    one_step_pretrain,
    ukf_finetune,
    weighted_state_loss,
    write_history_csv,
)
from .ukf import ModelSpec, UkfConfig, initial_belief, mixed_bundle, run_sequence

__all__ = ["main", "build_parser"]


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _load_run_config(args) -> RunConfig:
    overrides: dict[str, object] = {}
    if getattr(args, "seed", None) is not None:
        for key in ("model.seed", "train.seed", "sim.seed"):
            overrides[key] = args.seed
    if getattr(args, "workers", None) is not None:
        overrides["train.workers"] = args.workers
    for flag, key in (
        ("batch_size", "train.batch_size"),
        ("seq_len", "train.seq_len"),
        ("lr", "train.lr"),
        ("duration", "sim.duration"),
        ("mu", "sim.friction"),
        ("window", "evaluation.window"),
        ("burn_in", "evaluation.burn_in_samples"),
        ("model", "model.kind"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        overrides["train.pretrain_epochs"] = epochs
        overrides["train.finetune_epochs"] = epochs
    if getattr(args, "freeze_noise", False):
        overrides["train.freeze_noise"] = True
    if getattr(args, "freeze_dynamics", False):
        overrides["train.freeze_dynamics"] = True
    if getattr(args, "friction_prior", None) is not None:
        overrides["train.friction_prior"] = args.friction_prior
    return load_config(getattr(args, "config", None), os.environ, overrides)


def _spec_meta(spec: ModelSpec) -> dict:
    return {
        "model": {
            "kind": spec.kind,
            "heteroscedastic": spec.heteroscedastic,
            "estimate_friction": spec.estimate_friction,
            "seed": spec.seed,
            "v_eps": spec.v_eps,
            "force_scale": spec.force_scale,
        },
        "vehicle": dataclasses.asdict(spec.vehicle),
        "pacejka": dataclasses.asdict(spec.pacejka),
    }


def _spec_from_meta(meta: dict, fallback: ModelSpec) -> ModelSpec:
    """Rebuild the model description a checkpoint was trained under."""
    if "model" not in meta:
        return fallback
    m = meta["model"]
    vehicle = VehicleParams(**meta["vehicle"]) if "vehicle" in meta else fallback.vehicle
    if "pacejka" in meta:
        p = meta["pacejka"]
        pacejka = PacejkaParams(
            longitudinal=MagicFormula(**p["longitudinal"]),
            lateral_front=MagicFormula(**p["lateral_front"]),
            lateral_rear=MagicFormula(**p["lateral_rear"]),
            friction=p["friction"],
        )
    else:
        pacejka = fallback.pacejka
    return ModelSpec(
        kind=m["kind"],
        vehicle=vehicle,
        pacejka=pacejka,
        force_scale=m.get("force_scale", 30.0),
        heteroscedastic=m.get("heteroscedastic", False),
        estimate_friction=m.get("estimate_friction", False),
        v_eps=m.get("v_eps", 0.1),
        seed=m.get("seed", 0),
    )


def _load_model(path: str, cfg: RunConfig) -> tuple[ModelSpec, ParameterSet, dict]:
    params, meta = load_checkpoint(path)
    spec = _spec_from_meta(meta, model_spec_from(cfg))
    return spec, params, meta


def _split_for_training(ds: SyncedDataset, seed: int, no_split: bool):
    if no_split:
        return ds, None
    train, val, _test = split_dataset(ds, (0.7, 0.2, 0.1), seed=seed)
    return train, val


def _train_outputs(result, out: str, meta: dict) -> None:
    out_path = Path(out)
    save_checkpoint(result.final, out_path, meta)
    save_checkpoint(result.best, out_path.with_suffix(".best.json"), meta)
    write_history_csv(result.history, out_path.with_suffix(".history.csv"))


# ---------------------------------------------------------------------------
# estimates file
# ---------------------------------------------------------------------------

_EST_BASE_COLUMNS = ["window", "row", "t", "vx", "vy", "yaw_rate", "wheel_speed"]


def write_estimates(
    path: str | Path, means: np.ndarray, starts: np.ndarray, ds: SyncedDataset
) -> None:
    """Persist filter output: one row per (window, step), float-lossless."""
    length, n_win, n_state = means.shape
    cols = _EST_BASE_COLUMNS + (["friction"] if n_state == 5 else [])
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for w in range(n_win):
            for k in range(length):
                row_idx = int(starts[w]) + k
                cells = [str(w), str(row_idx), repr(float(ds.t[row_idx]))]
                cells += [repr(float(v)) for v in means[k, w]]
                writer.writerow(cells)


def load_estimates(path: str | Path) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Read estimates back: per-window mean arrays and dataset row indices."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header not in (_EST_BASE_COLUMNS, _EST_BASE_COLUMNS + ["friction"]):
            raise LogFormatError(f"{path}:1: unexpected header {header}")
        n_state = len(header) - 3
        by_window: dict[int, list[tuple[int, list[float]]]] = {}
        for row in reader:
            w = int(row[0])
            by_window.setdefault(w, []).append((int(row[1]), [float(v) for v in row[3:]]))
    means, rows = [], []
    for w in sorted(by_window):
        entries = by_window[w]
        rows.append(np.array([e[0] for e in entries]))
        means.append(np.array([e[1] for e in entries]).reshape(len(entries), n_state))
    return means, rows


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_simulate(args) -> int:
    cfg = _load_run_config(args)
    ds = simulate_dataset(cfg.sim, vehicle=cfg.vehicle, pacejka=cfg.pacejka)
    ds.save(args.out)
    print(f"wrote {len(ds)} rows at {ds.rate:g} Hz to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    spec = model_spec_from(cfg)
    ds = SyncedDataset.load(args.dataset)
    train_ds, val_ds = _split_for_training(ds, cfg.train.seed, args.no_split)
    params = spec.init_parameters(cfg.model.seed)
    result = one_step_pretrain(
        spec, params, train_ds, cfg.train, val_ds,
        log=print, on_checkpoint=_periodic_writer(args.out),
    )
    _train_outputs(result, args.out, _spec_meta(spec) | {"phase": "pretrain"})
    print(f"final loss {result.history[-1]['train_loss']:.6f}; checkpoints at {args.out}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _load_run_config(args)
    spec, params, meta = _load_model(args.checkpoint, cfg)
    ds = SyncedDataset.load(args.dataset)
    train_ds, val_ds = _split_for_training(ds, cfg.train.seed, args.no_split)
    result = ukf_finetune(
        spec, params, train_ds, cfg.train, cfg.ukf, val_ds,
        log=print, on_checkpoint=_periodic_writer(args.out),
    )
    _train_outputs(result, args.out, _spec_meta(spec) | {"phase": "finetune"})
    print(f"final loss {result.history[-1]['train_loss']:.6f}; checkpoints at {args.out}")
    return 0


def _periodic_writer(out: str):
    stem = Path(out)

    def hook(epoch: int, params: ParameterSet) -> None:
        save_checkpoint(params, stem.with_suffix(f".epoch{epoch + 1}.json"))

    return hook


def _run_filter(args, cfg: RunConfig):
    spec, params, _ = _load_model(args.checkpoint, cfg)
    ds = SyncedDataset.load(args.dataset)
    run, truth, starts = filter_windows(
        spec, params, ds, cfg.evaluation.window, cfg.ukf,
        friction_prior=getattr(args, "friction_prior", None),
    )
    means = run.mean_array()  # (L, W, n)
    if means.ndim == 2:  # single window: restore the window axis
        means = means[:, None, :]
    return spec, ds, means, truth, starts


def _cmd_estimate(args) -> int:
    cfg = _load_run_config(args)
    _, ds, means, _, starts = _run_filter(args, cfg)
    write_estimates(args.out, means, starts, ds)
    print(f"wrote {means.shape[1]} windows x {means.shape[0]} steps to {args.out}")
    return 0


def _report_format(path: str, explicit: str | None) -> str:
    if explicit:
        return explicit
    return "json" if path.endswith(".json") else "csv"


def _cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    weights = cfg.train.eval_weights()
    burn = cfg.evaluation.burn_in_samples
    dataset_id = Path(args.dataset).stem
    if args.estimates:
        ds = SyncedDataset.load(args.dataset)
        if ds.truth is None:
            raise ValueError("dataset has no ground truth to score against")
        means, rows = load_estimates(args.estimates)
        truths = [ds.truth[r] for r in rows]
        report = compute_metrics(
            means, truths, weights,
            model_id=args.model_id or Path(args.estimates).stem,
            dataset_id=dataset_id, burn_in=burn,
        )
    else:
        spec, ds, means, truth, _ = _run_filter(args, cfg)
        if truth is None:
            raise ValueError("dataset has no ground truth to score against")
        seqs = [means[:, w] for w in range(means.shape[1])]
        truths = [truth[:, w] for w in range(truth.shape[1])]
        report = compute_metrics(
            seqs, truths, weights,
            model_id=args.model_id or spec.kind,
            dataset_id=dataset_id, burn_in=burn,
        )
    emit_report([report], args.report, _report_format(args.report, args.format))
    print(
        f"{report.model_id} on {report.dataset_id}: "
        f"mse {report.mse:.6f} mae {report.mae:.6f} ae99 {report.ae99:.6f}"
    )
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = _load_run_config(args)
    spec = model_spec_from(cfg)
    rng = np.random.default_rng(cfg.train.seed)
    steps = args.steps
    t = np.arange(steps) * 0.01
    meas = np.stack(
        [
            1.5 * np.sin(2.0 * t) + 0.1 * rng.normal(size=steps),
            1.0 * np.sin(3.0 * t + 0.5) + 0.1 * rng.normal(size=steps),
            0.8 * np.sin(1.5 * t) + 0.02 * rng.normal(size=steps),
            3.0 + np.sin(t) + 0.05 * rng.normal(size=steps),
        ],
        axis=1,
    )
    ctrl = np.stack(
        [0.3 * np.sin(2.5 * t), 4.0 * np.sin(0.7 * t + 1.0)], axis=1
    )
    truth = np.stack(
        [3.0 + np.sin(t), 0.3 * np.sin(2 * t), 0.8 * np.sin(1.5 * t), 3.0 + np.sin(t)],
        axis=1,
    )
    params = spec.init_parameters(cfg.model.seed)

    def loss_fn(mapping):
        bundle = spec.bind(mapping)
        prior = 0.8 if spec.estimate_friction else None
        belief = initial_belief(meas[0], cfg.ukf, friction_prior=prior)
        run = run_sequence(bundle, belief, ctrl, meas, 0.01, cfg.ukf)
        return weighted_state_loss(run.means[1:], truth[1:], cfg.train.state_weights)

    err = grad_check(loss_fn, params, sample=args.sample, eps=args.eps, seed=cfg.train.seed)
    print(f"max relative gradient error over {args.sample} sampled coordinates: {err:.3e}")
    if err < args.tolerance:
        return 0
    print(f"exceeds tolerance {args.tolerance:g}", file=sys.stderr)
    return 1


def _cmd_ablate_mixed(args) -> int:
    cfg = _load_run_config(args)
    ds = SyncedDataset.load(args.dataset)
    if ds.truth is None:
        raise ValueError("dataset has no ground truth to score against")
    spec_a, params_a, _ = _load_model(args.predict_checkpoint, cfg)
    spec_b, params_b, _ = _load_model(args.update_checkpoint, cfg)
    map_a, map_b = params_a.untracked(), params_b.untracked()
    if spec_a.n_state != spec_b.n_state:
        # an augmented model crossed with a 4-state one drops to its
        # pinned-friction view so the pair shares a state space
        spec_a, map_a = spec_a.frozen_friction_view(map_a, spec_a.pacejka.friction)
        spec_b, map_b = spec_b.frozen_friction_view(map_b, spec_b.pacejka.friction)
    window = cfg.evaluation.window
    starts = ds.window_starts_tiled(window)
    if not len(starts):
        raise ValueError(f"no segment of the dataset fits a {window}-sample window")
    idx = starts[None, :] + np.arange(window)[:, None]
    weights = cfg.train.eval_weights()
    reports = []
    sides = {"a": (spec_a, map_a), "b": (spec_b, map_b)}
    for p_name, (p_spec, p_map) in sides.items():
        for u_name, (u_spec, u_map) in sides.items():
            bundle = mixed_bundle(p_spec, p_map, u_spec, u_map)
            prior = (
                float(p_spec.pacejka.friction) if bundle.estimates_friction else None
            )
            belief = initial_belief(ds.measurements[idx][0], cfg.ukf, friction_prior=prior)
            run = run_sequence(
                bundle, belief, ds.controls[idx], ds.measurements[idx], 1.0 / ds.rate, cfg.ukf
            )
            means = run.mean_array()
            if means.ndim == 2:
                means = means[:, None, :]
            seqs = [means[:, w] for w in range(means.shape[1])]
            truths = [ds.truth[idx][:, w] for w in range(means.shape[1])]
            reports.append(
                compute_metrics(
                    seqs, truths, weights,
                    model_id=f"predict={p_name}({p_spec.kind})|update={u_name}({u_spec.kind})",
                    dataset_id=Path(args.dataset).stem,
                    burn_in=cfg.evaluation.burn_in_samples,
                )
            )
    emit_report(reports, args.report, _report_format(args.report, args.format))
    for r in reports:
        print(f"{r.model_id}: mse {r.mse:.6f}")
    return 0


def _cmd_sweep_seqlen(args) -> int:
    cfg = _load_run_config(args)
    ds = SyncedDataset.load(args.dataset)
    train_ds, val_ds = _split_for_training(ds, cfg.train.seed, no_split=False)
    if val_ds is None or ds.truth is None:
        raise ValueError("sweep needs ground truth and a validation split")
    lengths = [int(v) for v in args.lengths.split(",")]
    seeds = [cfg.train.seed + k for k in range(args.seeds)]
    rows = []
    for length in lengths:
        for seed in seeds:
            spec, params, _ = _load_model(args.checkpoint, cfg)
            t_cfg = dataclasses.replace(
                cfg.train, seq_len=length, seed=seed,
                finetune_epochs=args.epochs, batch_size=args.batch_size or cfg.train.batch_size,
                val_interval=0,
            )
            t0 = time.perf_counter()
            result = ukf_finetune(spec, params, train_ds, t_cfg, cfg.ukf)
            per_epoch = (time.perf_counter() - t0) / max(1, args.epochs)
            run, truth, _ = filter_windows(
                spec, result.final, val_ds, cfg.evaluation.window, cfg.ukf,
                friction_prior=cfg.train.friction_prior,
            )
            means = run.mean_array()
            if means.ndim == 2:
                means = means[:, None, :]
            held_out = weighted_state_loss(
                list(means[1:]), truth[1:], cfg.train.state_weights
            ).item()
            rows.append((length, seed, held_out, per_epoch))
            print(
                f"length {length} seed {seed}: held-out loss {held_out:.6f}, "
                f"{per_epoch:.2f}s/epoch"
            )
    with Path(args.out).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["length", "seed", "held_out_loss", "sec_per_epoch"])
        for length, seed, loss, sec in rows:
            writer.writerow([length, seed, repr(loss), repr(sec)])
    print(f"wrote sweep results to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="velest",
        description="Vehicle velocity estimation: filters, training, studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p: argparse.ArgumentParser, workers: bool = False) -> None:
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--seed", type=int, help="pin model/train/sim seeds")
        if workers:
            p.add_argument("--workers", type=int, help="gradient accumulation chunks")

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="dataset CSV to write")
    p.add_argument("--duration", type=float, help="simulated seconds")
    p.add_argument("--mu", type=float, help="constant road friction")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("pretrain", help="one-step dynamics pretraining")
    common(p, workers=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint JSON to write")
    p.add_argument("--model", help="model kind: pc, pcr, nn, nnt, nntf")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--no-split", action="store_true", help="train on the whole dataset")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="estimation-loss training through the filter")
    common(p, workers=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint to start from")
    p.add_argument("--out", required=True, help="checkpoint JSON to write")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seq-len", type=int, dest="seq_len")
    p.add_argument("--lr", type=float)
    p.add_argument("--freeze-noise", action="store_true")
    p.add_argument("--freeze-dynamics", action="store_true")
    p.add_argument("--friction-prior", type=float, dest="friction_prior")
    p.add_argument("--no-split", action="store_true")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("estimate", help="run the filter, write estimates CSV")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, help="sequence length in samples")
    p.add_argument("--friction-prior", type=float, dest="friction_prior")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("evaluate", help="score estimates against ground truth")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", help="run the filter from this checkpoint")
    p.add_argument("--run-filter", action="store_true", help="filter then score (needs --checkpoint)")
    p.add_argument("--estimates", help="score a previously written estimates CSV")
    p.add_argument("--report", required=True, help="metrics file to write")
    p.add_argument("--format", choices=["csv", "json"])
    p.add_argument("--window", type=int)
    p.add_argument("--burn-in", type=int, dest="burn_in")
    p.add_argument("--friction-prior", type=float, dest="friction_prior")
    p.add_argument("--model-id", dest="model_id")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check through a rollout")
    common(p)
    p.add_argument("--model", help="model kind: pc, pcr, nn, nnt, nntf")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--sample", type=int, default=40, help="coordinates to probe")
    p.add_argument("--eps", type=float, default=5e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate-mixed", help="cross two models between predict and update")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--predict-checkpoint", required=True, dest="predict_checkpoint")
    p.add_argument("--update-checkpoint", required=True, dest="update_checkpoint")
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=["csv", "json"])
    p.add_argument("--window", type=int)
    p.set_defaults(func=_cmd_ablate_mixed)

    p = sub.add_parser("sweep-seqlen", help="training-window length study")
    common(p, workers=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True, help="pretrained starting point")
    p.add_argument("--out", required=True, help="sweep CSV to write")
    p.add_argument("--lengths", default="8,32,128,500,1000")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--window", type=int, help="held-out scoring window")
    p.set_defaults(func=_cmd_sweep_seqlen)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "evaluate" and not args.estimates and not args.checkpoint:
        parser.error("evaluate needs --checkpoint (with --run-filter) or --estimates")
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, CheckpointError, LogFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
