import json

import pytest
import torch

from splitcodec.checkpoint import Checkpoint, CheckpointError
from splitcodec.config import ExperimentConfig

from conftest import tiny_config, tiny_model


def test_defaults_and_ladders():
    cfg = ExperimentConfig()
    assert cfg.codec.analysis_widths == [32, 16, 8, 4]
    assert cfg.codec.synthesis_widths == [8, 16, 32, 128]
    assert cfg.lambdas == [0.001, 0.0025, 0.0075, 0.01]
    small = cfg.replace(model={"n_embd": 16})
    assert small.codec.analysis_widths == [8, 4, 2, 4]


@pytest.mark.parametrize("override", [
    {"model": {"split": 6}},
    {"model": {"split": 0}},
    {"train": {"lmbda": -0.1}},
    {"codec": {"variant": "wavelet"}},
    {"codec": {"analysis_widths": [8, 0, 4]}},
    {"codec": {"synthesis_widths": [8, 64]}},
])
def test_invalid_configs(override):
    with pytest.raises(ValueError):
        ExperimentConfig().replace(**override)


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ValueError, match="unknown"):
        ExperimentConfig.from_dict({"model": {"depth": 3}})
    with pytest.raises(ValueError, match="unknown"):
        ExperimentConfig.from_dict({"optimizer": {}})
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"split": 2}, "lambdas": [0.1, 0.2]}))
    cfg = ExperimentConfig.load(path)
    assert cfg.model.split == 2 and cfg.lambdas == [0.1, 0.2]


def test_config_hash_is_stable_and_sensitive():
    a, b = tiny_config(), tiny_config()
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != tiny_config("fourier").config_hash()
    assert a.config_hash() != a.replace(train={"seed": 1}).config_hash()
    assert ExperimentConfig.from_dict(a.to_dict()).config_hash() == a.config_hash()


@pytest.mark.parametrize("variant", ["proposed", "fourier", "direct_access"])
def test_checkpoint_roundtrip_is_byte_identical(tmp_path, variant):
    model = tiny_model(variant)
    path = Checkpoint.from_model(model, step=12, extra={"best_val": 1.25}).save(tmp_path / "a.safetensors")
    loaded = Checkpoint.load(path)
    loaded.save(tmp_path / "b.safetensors")
    assert path.read_bytes() == (tmp_path / "b.safetensors").read_bytes()
    assert loaded.step == 12 and loaded.extra == {"best_val": 1.25}
    rebuilt = loaded.build_model()
    for (k, v), (k2, v2) in zip(sorted(model.state_dict().items()), sorted(rebuilt.state_dict().items())):
        assert k == k2 and torch.equal(v, v2)
    assert rebuilt.fingerprint() == model.fingerprint()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "missing.safetensors")
    model = tiny_model()
    ck = Checkpoint.from_model(model)
    ck.state.pop(next(iter(ck.state)))
    with pytest.raises(CheckpointError, match="architecture"):
        ck.build_model()
