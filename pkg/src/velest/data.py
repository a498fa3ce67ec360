"""Datasets, sensor logs, resampling and a scripted driving simulator.

Two on-disk shapes:

* a *raw log* — rows at the sensors' native rates (IMU fast, wheel/servo
  slow), with empty cells where a channel has no sample at that instant;
* a *synced dataset* — one uniform grid holding measurements, controls
  and (when available) ground-truth states, the form every trainer and
  filter entry point consumes.

The simulator integrates the same single-track + magic-formula plant as
the physics filter model, in plain Python floats at a fine internal step,
and emits either form.  A scripted maneuver cycle (launch, slalom, drift
arc, braking turn) keeps the tires working across their nonlinear range,
and a road-friction schedule scales the true tire forces over time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.signal import savgol_filter

from .dynamics import DEFAULT_V_EPS, PacejkaParams, VehicleParams, default_pacejka

__all__ = [
    "RawLog",
    "SyncedDataset",
    "LogFormatError",
    "load_log",
    "write_log",
    "resample_sync",
    "savgol_velocity",
    "derive_truth_from_pose",
    "dataset_from_log",
    "simulate_log",
    "simulate_dataset",
    "split_dataset",
    "SimConfig",
    "MEASUREMENT_NOISE_STD",
]

#: accelerometer x/y [m/s^2], gyro [rad/s], wheel speed [m/s]
MEASUREMENT_NOISE_STD = np.array([0.3, 0.3, 0.02, 0.05])


class LogFormatError(ValueError):
    """A log file violated the expected layout; message carries the line."""


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass
class RawLog:
    """Per-channel samples at native rates.

    Every channel is (t, values) with strictly increasing times; channels
    need not share timestamps.  ``pose`` (world x, y, yaw) is optional —
    present on logs captured under a motion-capture system and absent on
    street logs.
    """

    imu_t: np.ndarray  # (Ni,)
    imu: np.ndarray  # (Ni, 3): ax, ay, gyro_z
    wheel_t: np.ndarray  # (Nw,)
    wheel: np.ndarray  # (Nw,): omega_s, rescaled to m/s
    control_t: np.ndarray  # (Nc,)
    control: np.ndarray  # (Nc, 2): steering [rad], motor current [A]
    pose_t: np.ndarray | None = None  # (Np,)
    pose: np.ndarray | None = None  # (Np, 3): x, y, yaw

    def duration(self) -> float:
        t0 = max(self.imu_t[0], self.wheel_t[0], self.control_t[0])
        t1 = min(self.imu_t[-1], self.wheel_t[-1], self.control_t[-1])
        if self.pose_t is not None:
            t0 = max(t0, self.pose_t[0])
            t1 = min(t1, self.pose_t[-1])
        return t1 - t0


@dataclass
class SyncedDataset:
    """Uniform-rate arrays ready for filtering and training.

    ``measurements`` columns are [ax, ay, gyro_z, omega_s] and
    ``controls`` are [steering, motor_current], matching the filter's
    measurement and control layouts.  ``segment_starts`` marks rows where
    time is discontinuous (slices of a parent dataset glued together);
    all window iteration respects these seams.  ``tire_label`` names the
    surface/tire condition per row, ``friction`` its numeric scale when
    known (simulated data).
    """

    rate: float
    t: np.ndarray  # (T,)
    measurements: np.ndarray  # (T, 4)
    controls: np.ndarray  # (T, 2)
    truth: np.ndarray | None = None  # (T, 4) ground-truth [vx, vy, r, omega_s]
    friction: np.ndarray | None = None  # (T,) true tire-road friction scale
    tire_label: np.ndarray | None = None  # (T,) str surface label
    segment_starts: np.ndarray = field(default_factory=lambda: np.array([0]))

    def __len__(self) -> int:
        return len(self.t)

    def __post_init__(self):
        n = len(self.t)
        if self.measurements.shape != (n, 4):
            raise ValueError(f"measurements shape {self.measurements.shape}, want ({n}, 4)")
        if self.controls.shape != (n, 2):
            raise ValueError(f"controls shape {self.controls.shape}, want ({n}, 2)")
        if self.truth is not None and self.truth.shape != (n, 4):
            raise ValueError(f"truth shape {self.truth.shape}, want ({n}, 4)")
        if self.friction is not None and self.friction.shape != (n,):
            raise ValueError(f"friction shape {self.friction.shape}, want ({n},)")
        if self.tire_label is not None and (
            len(self.tire_label) != n or any(not s for s in self.tire_label)
        ):
            raise ValueError("tire_label must name every row")

    def segment_bounds(self) -> list[tuple[int, int]]:
        starts = list(self.segment_starts) + [len(self)]
        return [(int(starts[i]), int(starts[i + 1])) for i in range(len(starts) - 1)]

    def valid_window_starts(self, length: int) -> np.ndarray:
        """Row indices where a window of ``length`` fits inside one segment."""
        parts = [
            np.arange(a, b - length + 1)
            for a, b in self.segment_bounds()
            if b - a >= length
        ]
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(parts)

    def window_starts_tiled(self, length: int, offset: int = 0) -> np.ndarray:
        """Non-overlapping windows tiled left-to-right within each segment."""
        parts = []
        for a, b in self.segment_bounds():
            count = (b - a - offset) // length
            if count > 0:
                parts.append(a + offset + np.arange(count) * length)
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(parts)

    def slice_rows(self, start: int, stop: int) -> "SyncedDataset":
        seg = [s - start for s in self.segment_starts if start < s < stop]
        return SyncedDataset(
            rate=self.rate,
            t=self.t[start:stop],
            measurements=self.measurements[start:stop],
            controls=self.controls[start:stop],
            truth=None if self.truth is None else self.truth[start:stop],
            friction=None if self.friction is None else self.friction[start:stop],
            tire_label=None if self.tire_label is None else self.tire_label[start:stop],
            segment_starts=np.array([0] + seg),
        )

    # -- persistence ---------------------------------------------------

    _COLUMNS = (
        "t,ax,ay,gyro_z,omega_s,delta,iq,"
        "gt_vx,gt_vy,gt_r,gt_omega_s,tire_label,friction,segment"
    ).split(",")

    def save(self, path: str | Path) -> None:
        path = Path(path)
        seg_id = np.zeros(len(self), dtype=int)
        for k, (a, b) in enumerate(self.segment_bounds()):
            seg_id[a:b] = k
        with path.open("w", newline="") as fh:
            fh.write(f"# rate={self.rate!r}\n")
            writer = csv.writer(fh)
            writer.writerow(self._COLUMNS)
            for i in range(len(self)):
                row = [repr(float(self.t[i]))]
                row += [repr(float(v)) for v in self.measurements[i]]
                row += [repr(float(v)) for v in self.controls[i]]
                if self.truth is not None:
                    row += [repr(float(v)) for v in self.truth[i]]
                else:
                    row += [""] * 4
                row.append("" if self.tire_label is None else str(self.tire_label[i]))
                row.append("" if self.friction is None else repr(float(self.friction[i])))
                row.append(str(seg_id[i]))
                writer.writerow(row)

    @classmethod
    def load(cls, path: str | Path) -> "SyncedDataset":
        path = Path(path)
        with path.open(newline="") as fh:
            first = fh.readline()
            if not first.startswith("# rate="):
                raise LogFormatError(f"{path}:1: missing '# rate=' header line")
            rate = float(first[len("# rate=") :].strip())
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != cls._COLUMNS:
                raise LogFormatError(f"{path}:2: unexpected columns {header}")
            rows = list(reader)
        if not rows:
            raise LogFormatError(f"{path}: no data rows")
        n = len(rows)
        t = np.empty(n)
        meas = np.empty((n, 4))
        ctrl = np.empty((n, 2))
        truth = np.empty((n, 4))
        fric = np.empty(n)
        labels: list[str] = []
        seg_id = np.empty(n, dtype=int)
        have_truth = have_fric = have_label = True
        for i, row in enumerate(rows):
            line = i + 3
            if len(row) != len(cls._COLUMNS):
                raise LogFormatError(f"{path}:{line}: {len(row)} cells, want {len(cls._COLUMNS)}")
            try:
                t[i] = float(row[0])
                meas[i] = [float(v) for v in row[1:5]]
                ctrl[i] = [float(v) for v in row[5:7]]
                if any(v == "" for v in row[7:11]):
                    have_truth = False
                else:
                    truth[i] = [float(v) for v in row[7:11]]
                if row[11] == "":
                    have_label = False
                else:
                    labels.append(row[11])
                if row[12] == "":
                    have_fric = False
                else:
                    fric[i] = float(row[12])
                seg_id[i] = int(row[13])
            except ValueError as e:
                raise LogFormatError(f"{path}:{line}: {e}") from None
        starts = [0] + [i for i in range(1, n) if seg_id[i] != seg_id[i - 1]]
        return cls(
            rate=rate,
            t=t,
            measurements=meas,
            controls=ctrl,
            truth=truth if have_truth else None,
            friction=fric if have_fric else None,
            tire_label=np.array(labels) if have_label else None,
            segment_starts=np.array(starts),
        )


# ---------------------------------------------------------------------------
# raw log file format
# ---------------------------------------------------------------------------

_LOG_COLUMNS = ["t", "ax", "ay", "gyro_z", "omega_s", "delta", "iq", "px", "py", "yaw"]


def write_log(log: RawLog, path: str | Path) -> None:
    """Merge the channels into one CSV ordered by time.

    Rows carry values only in the cells their channel owns; coincident
    timestamps across channels share a row.  Pose columns are omitted
    entirely when the log has no pose channel.
    """
    path = Path(path)
    has_pose = log.pose_t is not None
    cols = _LOG_COLUMNS if has_pose else _LOG_COLUMNS[:7]
    by_time: dict[float, list[str]] = {}

    def cells(t: float) -> list[str]:
        return by_time.setdefault(t, [""] * (len(cols) - 1))

    for i, t in enumerate(log.imu_t):
        cells(float(t))[0:3] = [repr(float(v)) for v in log.imu[i]]
    for i, t in enumerate(log.wheel_t):
        cells(float(t))[3] = repr(float(log.wheel[i]))
    for i, t in enumerate(log.control_t):
        cells(float(t))[4:6] = [repr(float(v)) for v in log.control[i]]
    if has_pose:
        for i, t in enumerate(log.pose_t):
            cells(float(t))[6:9] = [repr(float(v)) for v in log.pose[i]]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for t in sorted(by_time):
            writer.writerow([repr(t)] + by_time[t])


def load_log(path: str | Path) -> RawLog:
    """Parse a merged CSV back into per-channel arrays.

    Validates the header, cell counts, and per-channel time monotonicity;
    errors name the offending line.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header not in (_LOG_COLUMNS, _LOG_COLUMNS[:7]):
            raise LogFormatError(f"{path}:1: unexpected header {header}")
        has_pose = header == _LOG_COLUMNS
        rows = list(reader)
    if not rows:
        raise LogFormatError(f"{path}: no data rows")
    imu, wheel, control, pose = [], [], [], []
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            raise LogFormatError(f"{path}:{line}: {len(row)} cells, want {len(header)}")
        try:
            t = float(row[0])
        except ValueError:
            raise LogFormatError(f"{path}:{line}: bad timestamp {row[0]!r}") from None
        groups = [row[1:4], [row[4]], row[5:7]] + ([row[7:10]] if has_pose else [])
        for sink, group in zip((imu, wheel, control, pose), groups):
            filled = [c != "" for c in group]
            if not any(filled):
                continue
            if not all(filled):
                raise LogFormatError(f"{path}:{line}: partially filled channel group {group}")
            try:
                sink.append((t, [float(c) for c in group]))
            except ValueError:
                raise LogFormatError(f"{path}:{line}: non-numeric cell in {group}") from None

    def unpack(pairs: list, name: str, width: int) -> tuple[np.ndarray, np.ndarray]:
        if not pairs:
            raise LogFormatError(f"{path}: channel {name!r} has no samples")
        t = np.array([p[0] for p in pairs])
        v = np.array([p[1] for p in pairs])
        if np.any(np.diff(t) <= 0):
            k = int(np.argmax(np.diff(t) <= 0))
            raise LogFormatError(f"{path}: channel {name!r} time not increasing near t={t[k + 1]!r}")
        return t, (v[:, 0] if width == 1 else v)

    imu_t, imu_v = unpack(imu, "imu", 3)
    wheel_t, wheel_v = unpack(wheel, "wheel", 1)
    control_t, control_v = unpack(control, "control", 2)
    pose_t = pose_v = None
    if has_pose and pose:
        pose_t, pose_v = unpack(pose, "pose", 3)
    return RawLog(
        imu_t=imu_t, imu=imu_v, wheel_t=wheel_t, wheel=wheel_v,
        control_t=control_t, control=control_v, pose_t=pose_t, pose=pose_v,
    )


# ---------------------------------------------------------------------------
# resampling and ground-truth derivation
# ---------------------------------------------------------------------------


def resample_sync(log: RawLog, rate: float = 100.0) -> SyncedDataset:
    """Linearly interpolate every channel onto one uniform grid.

    The grid starts at the latest first-sample time over the channels and
    ends at the earliest last-sample time, so no channel is extrapolated;
    grid length is floor((t_end - t_start) * rate) + 1.
    """
    t0 = max(log.imu_t[0], log.wheel_t[0], log.control_t[0])
    t1 = min(log.imu_t[-1], log.wheel_t[-1], log.control_t[-1])
    if t1 <= t0:
        raise ValueError("channels do not overlap in time")
    n = int(math.floor((t1 - t0) * rate)) + 1
    grid = t0 + np.arange(n) / rate
    meas = np.empty((n, 4))
    for j in range(3):
        meas[:, j] = np.interp(grid, log.imu_t, log.imu[:, j])
    meas[:, 3] = np.interp(grid, log.wheel_t, log.wheel)
    ctrl = np.empty((n, 2))
    for j in range(2):
        ctrl[:, j] = np.interp(grid, log.control_t, log.control[:, j])
    if not (np.isfinite(meas).all() and np.isfinite(ctrl).all()):
        raise ValueError("non-finite values after interpolation")
    return SyncedDataset(rate=rate, t=grid, measurements=meas, controls=ctrl)


def savgol_velocity(
    positions: np.ndarray,
    yaw: np.ndarray,
    window_samples: int = 9,
    poly_order: int = 2,
    rate: float = 100.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Body-frame velocities and yaw rate by local polynomial derivative.

    Fits a least-squares polynomial over each sliding window of the world
    positions and evaluates its analytic derivative, then rotates into
    the body frame by the (smoothed) yaw; the yaw series itself gets the
    same treatment for the yaw rate.  Returns (vx, vy, r).
    """
    positions = np.asarray(positions, dtype=np.float64)
    yaw = np.unwrap(np.asarray(yaw, dtype=np.float64))
    if window_samples % 2 == 0 or window_samples < poly_order + 2:
        raise ValueError(
            f"window_samples must be odd and >= poly_order + 2, got {window_samples}"
        )
    if len(positions) < window_samples:
        raise ValueError(f"series of {len(positions)} samples shorter than window {window_samples}")
    delta = 1.0 / rate
    vx_w = savgol_filter(positions[:, 0], window_samples, poly_order, deriv=1, delta=delta)
    vy_w = savgol_filter(positions[:, 1], window_samples, poly_order, deriv=1, delta=delta)
    yaw_s = savgol_filter(yaw, window_samples, poly_order)
    r = savgol_filter(yaw, window_samples, poly_order, deriv=1, delta=delta)
    cy, sy = np.cos(yaw_s), np.sin(yaw_s)
    return cy * vx_w + sy * vy_w, -sy * vx_w + cy * vy_w, r


def derive_truth_from_pose(
    log: RawLog,
    ds: SyncedDataset,
    window_samples: int = 9,
    poly_order: int = 2,
) -> SyncedDataset:
    """Fill ground-truth states from a motion-capture pose channel.

    Pose is first interpolated onto the dataset grid, velocities come
    from :func:`savgol_velocity`, and the wheel-speed truth is the wheel
    channel smoothed by the same filter.
    """
    if log.pose_t is None or log.pose is None:
        raise ValueError("log has no pose channel")
    positions = np.stack(
        [np.interp(ds.t, log.pose_t, log.pose[:, j]) for j in range(2)], axis=1
    )
    yaw = np.interp(ds.t, log.pose_t, np.unwrap(log.pose[:, 2]))
    vx, vy, r = savgol_velocity(positions, yaw, window_samples, poly_order, ds.rate)
    omega = savgol_filter(ds.measurements[:, 3], window_samples, poly_order)
    truth = np.stack([vx, vy, r, omega], axis=1)
    return replace(ds, truth=truth)


def dataset_from_log(log: RawLog, rate: float = 100.0, **truth_kwargs) -> SyncedDataset:
    """Resample a raw log and, when it has pose, attach derived truth."""
    ds = resample_sync(log, rate)
    if log.pose_t is not None:
        ds = derive_truth_from_pose(log, ds, **truth_kwargs)
    return ds


# ---------------------------------------------------------------------------
# simulator
# ---------------------------------------------------------------------------


@dataclass
class SimConfig:
    duration: float = 40.0
    rate: float = 100.0  # output grid for direct datasets + slow channels
    imu_rate: float = 500.0  # fast channel in raw logs
    tick_rate: int = 1000  # simulation output ticks per second
    substeps: int = 2  # integrator substeps per tick (wheel dynamics are stiff)
    seed: int = 0
    friction: float | list[tuple[float, float]] = 1.0  # constant or [(t_start, mu), ...]
    segment_s: float = 4.0  # maneuver block length
    noise_std: np.ndarray = field(default_factory=lambda: MEASUREMENT_NOISE_STD.copy())
    v_eps: float = DEFAULT_V_EPS
    speed_limit: float = 20.0  # |vx| beyond this aborts the run
    min_rear_slip: float | None = None  # require max |rear slip angle| above this


_MANEUVERS = ("launch", "slalom", "drift_arc", "brake_turn")

#: control override signature: t -> (steering, motor_current)
ControlFn = Callable[[float], tuple[float, float]]


def _friction_at(schedule, t: float) -> float:
    if isinstance(schedule, (int, float)):
        return float(schedule)
    mu = float(schedule[0][1])
    for t_start, value in schedule:
        if t >= t_start:
            mu = float(value)
    return mu


def _control_schedule(cfg: SimConfig) -> ControlFn:
    """Per-segment scripted controls with seeded amplitude jitter."""
    rng = np.random.default_rng(cfg.seed)
    n_seg = max(1, int(math.ceil(cfg.duration / cfg.segment_s)))
    plans = []
    for k in range(n_seg):
        kind = _MANEUVERS[k % len(_MANEUVERS)]
        jitter = 0.8 + 0.4 * rng.random(size=3)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        plans.append((kind, jitter, sign))

    def control_at(t: float) -> tuple[float, float]:
        k = min(n_seg - 1, int(t / cfg.segment_s))
        kind, jitter, sign = plans[k]
        tau = t - k * cfg.segment_s
        if kind == "launch":
            steer = sign * 0.04 * jitter[1] * math.sin(2.0 * math.pi * 0.25 * tau)
            current = 7.0 * jitter[0] * min(1.0, tau / 1.0)
        elif kind == "slalom":
            steer = sign * 0.3 * jitter[0] * math.sin(2.0 * math.pi * 0.5 * jitter[1] * tau)
            current = 3.5 * jitter[2]
        elif kind == "drift_arc":
            steer = sign * 0.32 * jitter[0] * min(1.0, tau / 0.4)
            current = 8.0 * jitter[1]
        else:  # brake_turn
            steer = sign * 0.2 * jitter[0]
            current = -5.0 * jitter[1] * min(1.0, tau / 0.3)
        return max(-0.45, min(0.45, steer)), max(-20.0, min(20.0, current))

    return control_at


def _make_plant(vp: VehicleParams, pp: PacejkaParams, v_eps: float):
    """Plain-float single-track derivative, mirroring the filter physics."""
    lon, lat_f, lat_r = pp.longitudinal, pp.lateral_front, pp.lateral_rear

    def curve(c, s: float) -> float:
        bs = c.stiffness * s
        return c.peak * math.sin(c.shape * math.atan(bs - c.curvature * (bs - math.atan(bs))))

    def deriv(x, delta: float, current: float, mu: float):
        vx, vy, r, omega = x
        forward = max(vx, v_eps)
        ratio = (omega - vx) / max(abs(vx), v_eps)
        angle_f = delta - math.atan2(vy + vp.lf * r, forward)
        angle_r = -math.atan2(vy - vp.lr * r, forward)
        fx = mu * curve(lon, ratio)
        fyf = mu * curve(lat_f, angle_f)
        fyr = mu * curve(lat_r, angle_r)
        cd, sd = math.cos(delta), math.sin(delta)
        front_along = fx * cd - fyf * sd
        front_across = fx * sd + fyf * cd
        drag = vp.drag_coeff * vx * abs(vx)
        dvx = (fx + front_along - drag) / vp.mass + vy * r
        dvy = (front_across + fyr) / vp.mass - vx * r
        dr = (front_across * vp.lf - fyr * vp.lr) / vp.yaw_inertia
        spin_loss = vp.coulomb_friction * math.tanh(omega / 0.05) + vp.viscous_friction * omega
        domega = (vp.motor_gain * current - vp.wheel_radius * 2.0 * fx - spin_loss) / vp.drive_inertia
        return (dvx, dvy, dr, domega), angle_r

    return deriv


@dataclass
class _SimTrace:
    t: np.ndarray  # tick times
    state: np.ndarray  # (N, 4)
    deriv: np.ndarray  # (N, 4) plant derivative at each tick
    control: np.ndarray  # (N, 2)
    pose: np.ndarray  # (N, 3) world x, y, yaw
    friction: np.ndarray  # (N,)


def _simulate_trace(
    cfg: SimConfig,
    vehicle: VehicleParams | None,
    pacejka: PacejkaParams | None,
    control_fn: ControlFn | None,
) -> _SimTrace:
    vp = vehicle if vehicle is not None else VehicleParams()
    pp = pacejka if pacejka is not None else default_pacejka()
    plant = _make_plant(vp, pp, cfg.v_eps)
    control_at = control_fn if control_fn is not None else _control_schedule(cfg)
    if cfg.tick_rate % int(cfg.rate) or cfg.tick_rate % int(cfg.imu_rate):
        raise ValueError("rate and imu_rate must divide tick_rate")
    n_ticks = int(round(cfg.duration * cfg.tick_rate)) + 1
    h = 1.0 / (cfg.tick_rate * cfg.substeps)
    x = (0.0, 0.0, 0.0, 0.0)
    px = py = yaw = 0.0
    max_rear_slip = 0.0
    out_t = np.empty(n_ticks)
    out_x = np.empty((n_ticks, 4))
    out_dx = np.empty((n_ticks, 4))
    out_u = np.empty((n_ticks, 2))
    out_pose = np.empty((n_ticks, 3))
    out_mu = np.empty(n_ticks)
    for k in range(n_ticks):
        t = k / cfg.tick_rate
        delta, current = control_at(t)
        mu = _friction_at(cfg.friction, t)
        dx, a_r = plant(x, delta, current, mu)
        max_rear_slip = max(max_rear_slip, abs(a_r))
        out_t[k] = t
        out_x[k] = x
        out_dx[k] = dx
        out_u[k] = (delta, current)
        out_pose[k] = (px, py, yaw)
        out_mu[k] = mu
        if abs(x[0]) > cfg.speed_limit:
            raise RuntimeError(
                f"simulated vehicle exceeded {cfg.speed_limit} m/s at t={t:.3f} (tick {k})"
            )
        for _ in range(cfg.substeps):
            k1, _ = plant(x, delta, current, mu)
            x2 = tuple(x[i] + 0.5 * h * k1[i] for i in range(4))
            k2, _ = plant(x2, delta, current, mu)
            x3 = tuple(x[i] + 0.5 * h * k2[i] for i in range(4))
            k3, _ = plant(x3, delta, current, mu)
            x4 = tuple(x[i] + h * k3[i] for i in range(4))
            k4, _ = plant(x4, delta, current, mu)
            x = tuple(
                x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                for i in range(4)
            )
            cy, sy = math.cos(yaw), math.sin(yaw)
            px += h * (cy * x[0] - sy * x[1])
            py += h * (sy * x[0] + cy * x[1])
            yaw += h * x[2]
    if cfg.min_rear_slip is not None and max_rear_slip < cfg.min_rear_slip:
        raise RuntimeError(
            f"rear slip angle never exceeded {cfg.min_rear_slip} rad "
            f"(max {max_rear_slip:.3f}); maneuvers too tame"
        )
    return _SimTrace(out_t, out_x, out_dx, out_u, out_pose, out_mu)


def _specific_force(trace: _SimTrace) -> np.ndarray:
    """Body-frame accelerometer channels [ax, ay] from the trace."""
    vx, vy, r = trace.state[:, 0], trace.state[:, 1], trace.state[:, 2]
    ax = trace.deriv[:, 0] - r * vy
    ay = trace.deriv[:, 1] + r * vx
    return np.stack([ax, ay], axis=1)


def _labels_for(mu: np.ndarray) -> np.ndarray:
    return np.array([f"sim-mu-{m:g}" for m in mu])


def simulate_dataset(
    cfg: SimConfig,
    vehicle: VehicleParams | None = None,
    pacejka: PacejkaParams | None = None,
    control_fn: ControlFn | None = None,
) -> SyncedDataset:
    """Simulate and sample directly onto the uniform grid with exact truth."""
    trace = _simulate_trace(cfg, vehicle, pacejka, control_fn)
    step = cfg.tick_rate // int(cfg.rate)
    sel = np.arange(0, len(trace.t), step)
    accel = _specific_force(trace)[sel]
    state = trace.state[sel]
    noise = np.random.default_rng(cfg.seed + 1).normal(size=(len(sel), 4)) * cfg.noise_std
    meas = np.stack([accel[:, 0], accel[:, 1], state[:, 2], state[:, 3]], axis=1) + noise
    mu = trace.friction[sel]
    return SyncedDataset(
        rate=cfg.rate,
        t=trace.t[sel],
        measurements=meas,
        controls=trace.control[sel],
        truth=state.copy(),
        friction=mu.copy(),
        tire_label=_labels_for(mu),
    )


def simulate_log(
    cfg: SimConfig,
    vehicle: VehicleParams | None = None,
    pacejka: PacejkaParams | None = None,
    control_fn: ControlFn | None = None,
    with_pose: bool = True,
) -> RawLog:
    """Simulate and emit sensor channels at their native rates."""
    trace = _simulate_trace(cfg, vehicle, pacejka, control_fn)
    rng = np.random.default_rng(cfg.seed + 1)
    fast = np.arange(0, len(trace.t), cfg.tick_rate // int(cfg.imu_rate))
    slow = np.arange(0, len(trace.t), cfg.tick_rate // int(cfg.rate))
    accel = _specific_force(trace)
    imu = np.stack(
        [accel[fast, 0], accel[fast, 1], trace.state[fast, 2]], axis=1
    ) + rng.normal(size=(len(fast), 3)) * cfg.noise_std[:3]
    wheel = trace.state[slow, 3] + rng.normal(size=len(slow)) * cfg.noise_std[3]
    return RawLog(
        imu_t=trace.t[fast],
        imu=imu,
        wheel_t=trace.t[slow],
        wheel=wheel,
        control_t=trace.t[slow],
        control=trace.control[slow].copy(),
        pose_t=trace.t[slow] if with_pose else None,
        pose=trace.pose[slow].copy() if with_pose else None,
    )


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split_dataset(
    ds: SyncedDataset,
    fractions: Sequence[float] = (0.7, 0.2, 0.1),
    seed: int = 0,
) -> tuple[SyncedDataset, ...]:
    """Cut the dataset into contiguous blocks, one per fraction.

    Rows are never shuffled — downstream training needs contiguous time.
    The *placement* of the blocks along the timeline is permuted under
    the seed (e.g. the validation block may land first), while each
    returned dataset keeps the role order of ``fractions`` and exactly
    its proportional share of rows.
    """
    if not fractions or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must sum to 1, got {list(fractions)}")
    n = len(ds)
    order = np.random.default_rng(seed).permutation(len(fractions))
    sizes = [int(round(f * n)) for f in fractions]
    sizes[-1] = n - sum(sizes[:-1])
    if any(s < 1 for s in sizes):
        raise ValueError(f"dataset of {n} rows too short for fractions {list(fractions)}")
    out: list[SyncedDataset | None] = [None] * len(fractions)
    cursor = 0
    for role in order:
        out[role] = ds.slice_rows(cursor, cursor + sizes[role])
        cursor += sizes[role]
    return tuple(out)  # type: ignore[arg-type]
