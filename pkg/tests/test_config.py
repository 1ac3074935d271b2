from pathlib import Path

import pytest

from ffad.config import (
    FaultSpec,
    ModelConfig,
    RunConfig,
    SynthConfig,
    dump_config,
    load_config,
    load_profile,
)
from ffad.errors import ConfigError


def test_defaults():
    config = RunConfig()
    assert config.window.w == 50
    assert config.train.lr == 5e-4
    assert config.train.batch_size == 256
    assert (config.split.train, config.split.test, config.split.val) == (0.7, 0.2, 0.1)
    assert config.model.percentile == 95.0
    assert config.model.noise_variance == 0.007
    assert config.detect.threshold_policy == "best-f1"


def test_round_trip(tmp_path: Path):
    config = RunConfig.from_dict(
        {"output_dir": "out", "model": {"embed_dim": 16, "layers": 2}, "train": {"seed": 3}}
    )
    path = tmp_path / "config.yaml"
    dump_config(config, path)
    loaded = load_config(path)
    assert loaded == config
    assert loaded.config_hash() == config.config_hash()
    assert len(config.config_hash()) == 16


def test_hash_changes_with_values():
    a = RunConfig()
    b = RunConfig.from_dict({"train": {"seed": 1}})
    assert a.config_hash() != b.config_hash()

    # the output location doesn't change what is computed
    moved = RunConfig(output_dir="elsewhere")
    assert moved.config_hash() == a.config_hash()
    assert moved.to_dict()["output_dir"] == "elsewhere"


@pytest.mark.parametrize(
    "data,message",
    [
        ({"modle": {}}, "modle"),
        ({"model": {"embed_dimm": 3}}, "model.embed_dimm"),
        ({"model": {"kernel_size": 4}}, "odd"),
        ({"model": {"modalities": "video"}}, "modalities"),
        ({"model": {"alpha_m": 1.0, "alpha_l": 1.0}}, "alpha"),
        ({"split": {"train": 0.5, "test": 0.2, "val": 0.1}}, "sum to 1"),
        ({"parse_tree": {"sim_threshold": 0.0}}, "sim_threshold"),
        ({"detect": {"threshold_policy": "median"}}, "threshold policy"),
        ({"train": {"batch_size": "many"}}, "train.batch_size"),
        ({"window": {"w": 0}}, "minimum"),
    ],
)
def test_invalid(data, message):
    with pytest.raises(ConfigError, match=message):
        RunConfig.from_dict(data)


def test_missing_file(tmp_path: Path):
    path = tmp_path / "nope.yaml"
    with pytest.raises(ConfigError, match="nope.yaml"):
        load_config(path)


def test_benchmark_profile():
    config = load_profile("benchmark")
    assert config.synth.blocks == 10_000
    assert config.synth.anomaly_ratio == 0.05
    assert "correlated_lagged" in config.synth.fault_kinds
    assert config.model.embed_dim == 32
    assert config.window.w == 50

    with pytest.raises(ConfigError):
        load_profile("no-such-profile")


def test_fault_end():
    burst = FaultSpec(kind="template_burst", start=10, duration=5)
    lagged = FaultSpec(kind="correlated_lagged", start=10, duration=5, lag=3)
    assert burst.end == 15
    assert lagged.end == 18

    with pytest.raises(ConfigError, match="past T"):
        SynthConfig(blocks=12, faults=[burst])


def test_model_sizes():
    config = ModelConfig(window=4, metric_channels=2, log_channels=3)
    assert config.channels == 5
    assert config.nodes == 20


if __name__ == "__main__":
    pytest.main([__file__])
