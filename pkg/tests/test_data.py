"""Log parsing, resampling, derivative-based truth, simulator, splits."""

import numpy as np
import pytest

from velest.data import (
    LogFormatError,
    RawLog,
    SimConfig,
    SyncedDataset,
    dataset_from_log,
    derive_truth_from_pose,
    load_log,
    resample_sync,
    savgol_velocity,
    simulate_dataset,
    simulate_log,
    split_dataset,
    write_log,
)


def _tiny_log(duration=1.0, with_pose=True):
    """Hand-built log with channels at different rates and known content."""
    imu_t = np.arange(0.0, duration, 1 / 200)
    wheel_t = np.arange(0.0, duration, 1 / 100)
    control_t = np.arange(0.0, duration, 1 / 50)
    log = RawLog(
        imu_t=imu_t,
        imu=np.stack([np.sin(imu_t), np.cos(imu_t), imu_t * 0.1], axis=1),
        wheel_t=wheel_t,
        wheel=2.0 + wheel_t,
        control_t=control_t,
        control=np.stack([0.1 * np.sin(control_t), np.ones_like(control_t)], axis=1),
        pose_t=wheel_t if with_pose else None,
        pose=np.stack([wheel_t, wheel_t**2, 0.05 * wheel_t], axis=1) if with_pose else None,
    )
    return log


# ---------------------------------------------------------------------------
# raw log files
# ---------------------------------------------------------------------------


def test_log_round_trip_is_exact(tmp_path):
    log = _tiny_log()
    path = tmp_path / "run.csv"
    write_log(log, path)
    back = load_log(path)
    assert np.array_equal(back.imu_t, log.imu_t)
    assert np.array_equal(back.imu, log.imu)
    assert np.array_equal(back.wheel, log.wheel)
    assert np.array_equal(back.control, log.control)
    assert np.array_equal(back.pose, log.pose)


def test_log_round_trip_without_pose(tmp_path):
    log = _tiny_log(with_pose=False)
    path = tmp_path / "run.csv"
    write_log(log, path)
    back = load_log(path)
    assert back.pose_t is None and back.pose is None
    assert np.array_equal(back.wheel, log.wheel)


def test_load_log_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(LogFormatError, match=":1"):
        load_log(path)


def test_load_log_names_the_bad_line(tmp_path):
    log = _tiny_log(duration=0.1)
    path = tmp_path / "run.csv"
    write_log(log, path)
    lines = path.read_text().splitlines()
    lines[3] = lines[3].replace(",", ",,", 1)  # one extra cell on data line 3
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(LogFormatError, match=":4"):
        load_log(path)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def test_resample_grid_and_linear_exactness():
    log = _tiny_log(duration=2.0)
    ds = resample_sync(log, rate=100.0)
    assert ds.rate == 100.0
    assert ds.t[0] == 0.0
    dt = np.diff(ds.t)
    assert np.allclose(dt, 0.01, atol=1e-12)
    # the wheel channel is linear in t, so interpolation is exact
    assert np.allclose(ds.measurements[:, 3], 2.0 + ds.t, atol=1e-12)


def test_resample_starts_at_latest_channel_start():
    log = _tiny_log(duration=1.0)
    log.control_t = log.control_t + 0.25  # controls begin late
    ds = resample_sync(log, rate=100.0)
    assert ds.t[0] == pytest.approx(0.25)


def test_resample_requires_overlap():
    log = _tiny_log(duration=1.0)
    log.control_t = log.control_t + 100.0
    with pytest.raises(ValueError, match="overlap"):
        resample_sync(log, rate=100.0)


# ---------------------------------------------------------------------------
# derivative-based ground truth
# ---------------------------------------------------------------------------


def test_savgol_exact_on_quadratic_position():
    rate = 100.0
    t = np.arange(0, 3.0, 1 / rate)
    # straight-line heading, quadratic positions: velocity is linear in t
    pos = np.stack([1.0 + 2.0 * t + 0.5 * t**2, -0.3 * t + 0.2 * t**2], axis=1)
    yaw = np.zeros_like(t)
    vx, vy, r = savgol_velocity(pos, yaw, window_samples=9, poly_order=2, rate=rate)
    interior = slice(8, -8)
    assert np.max(np.abs(vx[interior] - (2.0 + t[interior]))) < 1e-9
    assert np.max(np.abs(vy[interior] - (-0.3 + 0.4 * t[interior]))) < 1e-9
    assert np.max(np.abs(r[interior])) < 1e-9


def test_savgol_rotates_into_body_frame():
    rate = 100.0
    t = np.arange(0, 2.0, 1 / rate)
    yaw = np.full_like(t, np.pi / 2)  # facing +y
    pos = np.stack([np.zeros_like(t), 3.0 * t], axis=1)  # moving +y at 3 m/s
    vx, vy, _ = savgol_velocity(pos, yaw, rate=rate)
    interior = slice(8, -8)
    assert np.allclose(vx[interior], 3.0, atol=1e-9)
    assert np.allclose(vy[interior], 0.0, atol=1e-9)


def test_savgol_validates_window():
    pos = np.zeros((50, 2))
    yaw = np.zeros(50)
    with pytest.raises(ValueError, match="odd"):
        savgol_velocity(pos, yaw, window_samples=8)
    with pytest.raises(ValueError, match="shorter"):
        savgol_velocity(pos[:5], yaw[:5], window_samples=9)


def test_noiseless_sim_to_truth_pipeline():
    cfg = SimConfig(duration=5.0, seed=2, friction=0.8, noise_std=np.zeros(4))
    log = simulate_log(cfg, with_pose=True)
    ds = dataset_from_log(log)
    direct = simulate_dataset(cfg)
    # align the grids (same rate, same start here) and compare velocities
    n = min(len(ds), len(direct))
    err = ds.truth[8 : n - 8, :2] - direct.truth[8 : n - 8, :2]
    rmse = float(np.sqrt(np.mean(err**2)))
    assert rmse < 0.01


def test_derive_truth_requires_pose():
    log = _tiny_log(with_pose=False)
    ds = resample_sync(log)
    with pytest.raises(ValueError, match="pose"):
        derive_truth_from_pose(log, ds)


# ---------------------------------------------------------------------------
# dataset persistence and windows
# ---------------------------------------------------------------------------


def test_dataset_save_load_round_trip(tmp_path):
    ds = simulate_dataset(SimConfig(duration=2.0, seed=3, friction=0.7))
    path = tmp_path / "ds.csv"
    ds.save(path)
    back = SyncedDataset.load(path)
    assert back.rate == ds.rate
    assert np.array_equal(back.t, ds.t)
    assert np.array_equal(back.measurements, ds.measurements)
    assert np.array_equal(back.controls, ds.controls)
    assert np.array_equal(back.truth, ds.truth)
    assert np.array_equal(back.friction, ds.friction)
    assert list(back.tire_label) == list(ds.tire_label)
    assert np.array_equal(back.segment_starts, ds.segment_starts)


def test_dataset_save_load_without_truth(tmp_path):
    log = _tiny_log(with_pose=False, duration=1.0)
    ds = resample_sync(log)
    path = tmp_path / "ds.csv"
    ds.save(path)
    back = SyncedDataset.load(path)
    assert back.truth is None
    assert back.friction is None
    assert np.array_equal(back.measurements, ds.measurements)


def test_dataset_load_rejects_missing_rate_header(tmp_path):
    path = tmp_path / "ds.csv"
    path.write_text("t,ax\n")
    with pytest.raises(LogFormatError, match="rate"):
        SyncedDataset.load(path)


def _segmented(n=30, seam=12):
    return SyncedDataset(
        rate=100.0,
        t=np.arange(n) / 100.0,
        measurements=np.zeros((n, 4)),
        controls=np.zeros((n, 2)),
        segment_starts=np.array([0, seam]),
    )


def test_windows_respect_segment_seams():
    ds = _segmented(n=30, seam=12)
    starts = ds.valid_window_starts(10)
    # fits at 0..2 inside [0,12) and 12..20 inside [12,30)
    assert starts.tolist() == [0, 1, 2] + list(range(12, 21))
    tiled = ds.window_starts_tiled(10)
    assert tiled.tolist() == [0, 12]
    assert ds.valid_window_starts(13).tolist() == list(range(12, 18))


def test_slice_rows_remaps_seams():
    ds = _segmented(n=30, seam=12)
    cut = ds.slice_rows(5, 20)
    assert cut.segment_starts.tolist() == [0, 7]
    assert len(cut) == 15


def test_split_dataset_sizes_and_coverage():
    ds = simulate_dataset(SimConfig(duration=9.99, seed=0))
    n = len(ds)
    assert n == 1000
    a, b, c = split_dataset(ds, (0.7, 0.2, 0.1), seed=0)
    assert (len(a), len(b), len(c)) == (700, 200, 100)
    joined = np.sort(np.concatenate([a.t, b.t, c.t]))
    assert np.array_equal(joined, ds.t)
    # each split is contiguous in time
    for part in (a, b, c):
        assert np.allclose(np.diff(part.t), 0.01, atol=1e-12)


def test_split_dataset_is_seeded():
    ds = simulate_dataset(SimConfig(duration=5.0, seed=0))
    a1, _, _ = split_dataset(ds, seed=4)
    a2, _, _ = split_dataset(ds, seed=4)
    assert np.array_equal(a1.t, a2.t)


def test_split_rejects_bad_fractions():
    ds = simulate_dataset(SimConfig(duration=2.0, seed=0))
    with pytest.raises(ValueError, match="sum to 1"):
        split_dataset(ds, (0.5, 0.2))


# ---------------------------------------------------------------------------
# simulator behavior
# ---------------------------------------------------------------------------


def test_simulate_dataset_is_deterministic():
    cfg = SimConfig(duration=3.0, seed=9, friction=0.65)
    a = simulate_dataset(cfg)
    b = simulate_dataset(cfg)
    assert np.array_equal(a.measurements, b.measurements)
    assert np.array_equal(a.truth, b.truth)
    c = simulate_dataset(SimConfig(duration=3.0, seed=10, friction=0.65))
    assert not np.array_equal(a.measurements, c.measurements)


def test_friction_schedule_switches_mid_run():
    cfg = SimConfig(duration=4.0, seed=1, friction=[(0.0, 0.8), (2.0, 0.4)])
    ds = simulate_dataset(cfg)
    assert np.all(ds.friction[ds.t < 2.0] == 0.8)
    assert np.all(ds.friction[ds.t >= 2.0] == 0.4)
    assert ds.tire_label[0] == "sim-mu-0.8"
    assert ds.tire_label[-1] == "sim-mu-0.4"


def test_speed_limit_aborts_runaway():
    def full_throttle(t):
        return 0.0, 60.0

    cfg = SimConfig(duration=30.0, seed=0, speed_limit=5.0)
    with pytest.raises(RuntimeError, match="exceeded 5.0"):
        simulate_dataset(cfg, control_fn=full_throttle)


def test_min_rear_slip_gate():
    def gentle(t):
        return 0.0, 0.5

    cfg = SimConfig(duration=3.0, seed=0, min_rear_slip=0.2)
    with pytest.raises(RuntimeError, match="too tame"):
        simulate_dataset(cfg, control_fn=gentle)
    # the built-in maneuver schedule is aggressive enough to clear the bar
    simulate_dataset(SimConfig(duration=8.0, seed=0, friction=0.65, min_rear_slip=0.15))


def test_truth_matches_measured_wheel_channel_up_to_noise():
    cfg = SimConfig(duration=3.0, seed=5, friction=0.8)
    ds = simulate_dataset(cfg)
    resid = ds.measurements[:, 3] - ds.truth[:, 3]
    assert np.abs(np.mean(resid)) < 0.02
    assert 0.02 < np.std(resid) < 0.1  # default wheel noise is 0.05


def test_measurements_contain_rotating_frame_terms():
    cfg = SimConfig(duration=6.0, seed=5, friction=0.8, noise_std=np.zeros(4))
    ds = simulate_dataset(cfg)
    # during cornering ay should roughly track r*vx (centripetal) rather
    # than vy-dot alone; in a drift vy-dot contributes too, so only ask
    # for a clear positive correlation
    r_vx = ds.truth[:, 2] * ds.truth[:, 0]
    mask = np.abs(r_vx) > 1.0
    assert mask.sum() > 50
    corr = np.corrcoef(ds.measurements[mask, 1], r_vx[mask])[0, 1]
    assert corr > 0.6
