import numpy as np
import pytest

from velest.metrics import (
    EvalConfig,
    MetricsReport,
    compute_metrics,
    emit_report,
    load_report,
)

W = np.array([0.223, 0.506, 0.157, 0.0])


def test_metrics_match_hand_computation():
    rng = np.random.default_rng(1)
    est = [rng.normal(size=(50, 4)), rng.normal(size=(30, 4))]
    tru = [rng.normal(size=(50, 4)), rng.normal(size=(30, 4))]
    rep = compute_metrics(est, tru, W)
    err = np.concatenate([e - t for e, t in zip(est, tru)], axis=0)
    assert rep.mse == pytest.approx(float(((err**2) @ W).mean()), rel=1e-14)
    assert rep.mae == pytest.approx(float((np.abs(err) @ W).mean()), rel=1e-14)
    assert np.allclose(rep.per_state_mse, (err**2).mean(axis=0), atol=1e-15)
    assert rep.sequence_count == 2


def test_percentile_is_linear_interpolated():
    # 101 spaced values 0..100 on one channel, weight 1: q99 is exactly 99.0;
    # with 100 values 1..100 the linear method interpolates 99.01.
    vals = np.arange(1.0, 101.0)
    est = [np.stack([vals, *([np.zeros(100)] * 3)], axis=1)]
    tru = [np.zeros((100, 4))]
    rep = compute_metrics(est, tru, np.array([1.0, 0, 0, 0]))
    assert rep.ae99 == pytest.approx(99.01)


def test_pooling_is_per_timestep_not_per_sequence():
    # One long accurate sequence + one short bad one: pooling weights rows
    # equally, so the short sequence is diluted by its row count.
    est = [np.zeros((90, 4)), np.ones((10, 4))]
    tru = [np.zeros((90, 4)), np.zeros((10, 4))]
    rep = compute_metrics(est, tru, np.array([1.0, 0, 0, 0]))
    assert rep.mse == pytest.approx(0.1)  # 10 bad rows of 100


def test_estimates_may_carry_friction_column():
    est5 = [np.concatenate([np.ones((20, 4)), np.full((20, 1), 0.7)], axis=1)]
    tru = [np.zeros((20, 4))]
    rep5 = compute_metrics(est5, tru, W)
    rep4 = compute_metrics([est5[0][:, :4]], tru, W)
    assert rep5.mse == rep4.mse


def test_burn_in_drops_sequence_heads():
    est = [np.concatenate([np.full((5, 4), 100.0), np.zeros((15, 4))])]
    tru = [np.zeros((20, 4))]
    rep = compute_metrics(est, tru, W, burn_in=5)
    assert rep.mse == 0.0
    with pytest.raises(ValueError, match="burn-in"):
        compute_metrics([np.zeros((3, 4))], [np.zeros((3, 4))], W, burn_in=5)


def test_shape_and_emptiness_validation():
    with pytest.raises(ValueError, match="no sequences"):
        compute_metrics([], [], W)
    with pytest.raises(ValueError, match="shape"):
        compute_metrics([np.zeros((5, 4))], [np.zeros((6, 4))], W)
    with pytest.raises(ValueError, match="weights"):
        compute_metrics([np.zeros((5, 4))], [np.zeros((5, 4))], np.ones(3))
    with pytest.raises(ValueError, match="finite"):
        MetricsReport(
            mse=np.nan, mae=0.0, ae99=0.0,
            per_state_mse=np.zeros(4), per_state_mae=np.zeros(4),
        )


def test_eval_config_validation():
    assert EvalConfig().window == 1000
    with pytest.raises(ValueError, match="window"):
        EvalConfig(window=1)
    with pytest.raises(ValueError, match="burn_in"):
        EvalConfig(window=10, burn_in_samples=10)


def _sample_reports():
    rng = np.random.default_rng(2)
    reports = []
    for model in ("pc", "nntf"):
        est = [rng.normal(size=(40, 4))]
        tru = [rng.normal(size=(40, 4))]
        reports.append(
            compute_metrics(est, tru, W, model_id=model, dataset_id="sim-mu-0.65")
        )
    return reports


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_report_round_trip_is_lossless(tmp_path, fmt):
    reports = _sample_reports()
    path = tmp_path / f"report.{fmt}"
    emit_report(reports, path, format=fmt)
    rows = load_report(path)
    assert len(rows) == 2
    for rep, row in zip(reports, rows):
        assert row["model"] == rep.model_id
        assert row["dataset"] == rep.dataset_id
        assert row["sequences"] == rep.sequence_count
        assert row["mse"] == rep.mse  # exact: shortest round-trip decimals
        assert row["ae99"] == rep.ae99
        assert row["mse_vy"] == float(rep.per_state_mse[1])


def test_emit_report_rejects_bad_inputs(tmp_path):
    with pytest.raises(ValueError, match="no reports"):
        emit_report([], tmp_path / "x.csv")
    with pytest.raises(ValueError, match="format"):
        emit_report(_sample_reports(), tmp_path / "x.xml", format="xml")
