import json

import numpy as np
import pytest

from velest.autodiff import ParameterSet
from velest.checkpoint import (
    CHECKPOINT_VERSION,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from velest.ukf import ModelSpec


def _params():
    rng = np.random.default_rng(9)
    ps = ParameterSet()
    ps.add("net.w0", rng.normal(size=(3, 4)))
    ps.add("net.b0", rng.normal(size=4))
    ps.add("noise.q", np.array(0.123456789012345678))
    return ps


def test_round_trip_bit_exact(tmp_path):
    ps = _params()
    path = tmp_path / "ckpt.json"
    save_checkpoint(ps, path, meta={"seed": 3, "note": "x"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"seed": 3, "note": "x"}
    assert list(loaded.names()) == list(ps.names())
    for k in ps.names():
        assert np.array_equal(loaded[k], ps[k]), k
        assert loaded[k].shape == ps[k].shape


def test_identical_params_produce_identical_bytes(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_checkpoint(_params(), a)
    save_checkpoint(_params(), b)
    assert a.read_bytes() == b.read_bytes()


def test_model_spec_parameters_survive_round_trip(tmp_path):
    spec = ModelSpec(kind="nntf", estimate_friction=True, seed=4)
    ps = spec.init_parameters(seed=4)
    path = tmp_path / "model.json"
    save_checkpoint(ps, path)
    loaded, _ = load_checkpoint(path)
    for k in ps.names():
        assert np.array_equal(loaded[k], ps[k])
    # the restored set binds and runs
    bundle = spec.bind(loaded.untracked())
    assert bundle is not None


def test_missing_file_raises(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "absent.json")


def test_invalid_json_raises(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(CheckpointError, match="JSON"):
        load_checkpoint(p)


def test_unknown_version_raises(tmp_path):
    p = tmp_path / "v.json"
    p.write_text(json.dumps({"version": CHECKPOINT_VERSION + 1, "tensors": {}}))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)


def test_malformed_tensor_raises(tmp_path):
    p = tmp_path / "m.json"
    manifest = {
        "version": CHECKPOINT_VERSION,
        "tensors": {"w": {"shape": [2, 2], "values": [1.0, 2.0, 3.0]}},
    }
    p.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="malformed"):
        load_checkpoint(p)


def test_nonfinite_values_rejected(tmp_path):
    p = tmp_path / "nan.json"
    manifest = {
        "version": CHECKPOINT_VERSION,
        "tensors": {"w": {"shape": [1], "values": [None]}},
    }
    p.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="non-finite|malformed"):
        load_checkpoint(p)


def test_scalar_tensor_shape_preserved(tmp_path):
    ps = ParameterSet()
    ps.add("s", np.array(2.5))
    path = tmp_path / "s.json"
    save_checkpoint(ps, path)
    loaded, _ = load_checkpoint(path)
    assert loaded["s"].shape == ()
    assert loaded["s"] == 2.5
