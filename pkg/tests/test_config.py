"""Tests for configuration loading and validation."""
import pytest
import yaml

from nightreid.config import (
    Config,
    LossWeights,
    ModelConfig,
    build_config,
    config_defaults,
    load_config,
)
from nightreid.errors import ConfigError


def test_defaults():
    """Test the empty document gives the full-size defaults."""
    config = load_config()

    assert isinstance(config, Config)
    assert config.model.img_size == (256, 128)
    assert config.model.embed_dim == 768
    assert config.model.shared_depth == 5
    assert config.train.base_lr == 0.008
    assert config.train.batch_size == 64
    assert config.train.pattern == ("real", "synthetic")
    assert config.loss.lambda_relight == 0.5
    assert config.loss.lambda_distill == 0.1
    assert config.degradation.brightness_range == (10.0, 38.0)
    assert config.eval.ranks == (1, 5, 10)
    assert config_defaults()["model"]["preset"] == "paper"


def test_toy_preset_with_override(tmp_path):
    """Test explicit model keys win over the preset."""
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump({"model": {"preset": "toy", "embed_dim": 32}}), encoding="utf-8")
    config = load_config(path, {"train.base_lr": "0.1", "train.pattern": ["synthetic"]})

    assert config.model.img_size == (64, 32)
    assert config.model.embed_dim == 32
    assert config.train.base_lr == 0.1
    assert config.train.pattern == ("synthetic",)


def test_round_trip_through_yaml(tmp_path):
    """Test a dumped configuration loads back unchanged."""
    config = build_config({"model": {"preset": "toy", "num_classes": {"real": 3}}, "train": {"seed": 9}})
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(config.to_dict()), encoding="utf-8")

    assert load_config(path) == config


@pytest.mark.parametrize(
    "doc",
    [
        {"train": {"pattern": []}},
        {"train": {"pattern": ["daylight"]}},
        {"train": {"base_lr": 0}},
        {"loss": {"lambda_relight": -1}},
        {"degradation": {"brightness_range": [0, 10]}},
        {"degradation": {"contrast_range": [20, 10]}},
        {"model": {"preset": "huge"}},
        {"model": {"num_classes": {"night": 3}}},
        {"unknown": {}},
    ],
)
def test_invalid_documents(doc):
    """Test schema violations raise ConfigError."""
    with pytest.raises(ConfigError):
        build_config(doc)


def test_hue_range_may_start_at_zero():
    """Test the hue range is the only one allowed to start at zero."""
    config = build_config({"degradation": {"hue_range": [0, 0]}})

    assert config.degradation.hue_range == (0.0, 0.0)


def test_shape_invariants():
    """Test patch and head divisibility."""
    with pytest.raises(ConfigError):
        ModelConfig(img_size=(250, 128))
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=100, num_heads=12)
    with pytest.raises(ConfigError):
        build_config({"model": {"preset": "toy", "patch_size": 7}})


def test_negative_weight():
    """Test loss weights are checked outside the schema too."""
    with pytest.raises(ConfigError):
        LossWeights(lambda_sa=-0.1)


def test_unknown_override():
    """Test overrides must name a known section."""
    with pytest.raises(ConfigError):
        load_config(overrides={"optimizer.lr": 1})
    with pytest.raises(ConfigError):
        load_config(overrides={"train": 1})


def test_bad_files(tmp_path):
    """Test unreadable, unparsable and non-mapping files."""
    with pytest.raises(OSError):
        load_config(tmp_path / "missing.yaml")

    path = tmp_path / "bad.yaml"
    path.write_text("model: [unclosed\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)

    path.write_text("- a\n- b\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


def test_empty_file(tmp_path):
    """Test an empty file means all defaults."""
    path = tmp_path / "empty.yaml"
    path.write_text("", encoding="utf-8")

    assert load_config(path) == load_config()
