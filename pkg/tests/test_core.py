import json

import numpy as np
import pytest

from groupfl.core import (
    ConfigError,
    ContractError,
    PersistenceError,
    RunConfig,
    as_param_vector,
    load_checkpoint,
    save_checkpoint,
    seeded_rng,
)


@pytest.mark.parametrize("values", [[0.0, 0.0], [1.5, -2.25, 3.0]])
def test_checkpoint_round_trip_small(tmp_path, values):
    path = tmp_path / "m.ckpt"
    save_checkpoint(np.array(values), path)
    out = load_checkpoint(path)
    assert out.tolist() == values


def test_checkpoint_round_trip_bit_exact(tmp_path):
    values = np.random.default_rng(0).uniform(-1e6, 1e6, size=10_000)
    path = tmp_path / "big.ckpt"
    save_checkpoint(values, path)
    out = load_checkpoint(path)
    assert out.tobytes() == values.tobytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(np.array([1.0, -0.5]), path)
    raw = path.read_bytes()
    assert raw[:6] == b"FGSIM1"
    assert int.from_bytes(raw[6:10], "little") == 1
    assert int.from_bytes(raw[10:18], "little") == 2
    assert np.frombuffer(raw[18:], "<f8").tolist() == [1.0, -0.5]


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTMAGIC" + b"\0" * 20)
    with pytest.raises(PersistenceError):
        load_checkpoint(bad)
    with pytest.raises(PersistenceError, match="missing"):
        load_checkpoint(tmp_path / "missing.ckpt")
    with pytest.raises(PersistenceError):
        save_checkpoint(np.zeros(2), tmp_path / "no" / "such" / "dir.ckpt")
    good = tmp_path / "t.ckpt"
    save_checkpoint(np.zeros(4), good)
    good.write_bytes(good.read_bytes()[:-3])
    with pytest.raises(PersistenceError, match="expected 4"):
        load_checkpoint(good)


def test_param_vector_rejects_non_finite():
    with pytest.raises(ContractError):
        as_param_vector([1.0, np.nan])
    with pytest.raises(ContractError):
        as_param_vector([1.0, 2.0], dim=3)


def test_seeded_rng_determinism_and_separation():
    a = seeded_rng(42, "sampler").random(100)
    assert np.array_equal(a, seeded_rng(42, "sampler").random(100))
    assert not np.array_equal(a, seeded_rng(42, "init").random(100))
    assert not np.array_equal(a, seeded_rng(43, "sampler").random(100))


def test_seeded_rng_accepts_full_u64_range():
    seeded_rng(2**64 - 1, "x").random()
    with pytest.raises(ContractError):
        seeded_rng(2**64, "x")


def test_run_config_json_round_trip(tmp_path):
    cfg = RunConfig(T=3, eta_G=0.05, seed=7)
    path = tmp_path / "run.json"
    path.write_text(cfg.to_json())
    assert set(json.loads(path.read_text())) >= {
        "T", "T_g", "K", "K_l", "cohort_size", "eta_G", "eta_g", "eta_l", "eta_il",
        "batch_size", "seed"}
    assert RunConfig.from_json_file(path) == cfg


@pytest.mark.parametrize("bad", [{"T": 0}, {"K": -1}, {"eta_G": 0.0}, {"eta_l": -1.0},
                                 {"batch_size": 1.5}, {"weighting": "median"}, {"nope": 1}])
def test_run_config_validation(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)
