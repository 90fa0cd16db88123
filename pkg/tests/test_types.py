"""Tests for configuration models and validation."""

import json
from pathlib import Path

import pytest

from mia_former.errors import ConfigError
from mia_former.types import (
    AttackSpec,
    DatasetSpec,
    MIAConfig,
    config_hash,
    load_config,
    save_config,
    validate_config,
)

TINY = {
    "num_blocks": 4,
    "num_heads": 4,
    "head_dim": 16,
    "image_size": 32,
    "patch_size": 8,
    "num_classes": 10,
}


def test_tiny_derived_sizes() -> None:
    """Test the tiny config's derived dimensions."""
    cfg = MIAConfig.tiny()
    assert cfg.grid == (4, 4)
    assert cfg.num_tokens == 16
    assert cfg.embed_dim == 64
    assert cfg.mlp_group_dim == 32
    assert cfg.mlp_hidden == 128
    assert cfg.ctrl_dim == 4
    assert cfg.head_feat_dim == 4
    assert cfg.ctrl_width == 16
    assert cfg.num_cls == 1


def test_head_dim_not_divisible_by_four_names_field() -> None:
    """Test E=6 without explicit controller widths is rejected on head_dim."""
    with pytest.raises(ConfigError) as excinfo:
        validate_config({**TINY, "head_dim": 6})
    assert excinfo.value.field == "head_dim"


def test_head_dim_allowed_with_explicit_widths() -> None:
    """Test E=6 is accepted once E' and E'' are given."""
    cfg = validate_config({**TINY, "head_dim": 6, "controller_hidden": 2, "head_feature_dim": 3})
    assert cfg.ctrl_width == 8
    assert cfg.head_feat_dim == 3


@pytest.mark.parametrize(
    ("override", "field"),
    [
        ({"patch_size": 5}, "image_size"),
        ({"mlp_ratio": 1.3}, "mlp_ratio"),
        ({"dynamic_dims": ["depth", "depth"]}, "dynamic_dims"),
        ({"target_flops_ratio": 0.0}, "target_flops_ratio"),
        ({"num_heads": 0}, "num_heads"),
        ({"pixel_mean": [0.5]}, "pixel_mean"),
    ],
)
def test_invalid_fields(override: dict, field: str) -> None:
    """Test each invariant violation reports the offending field."""
    with pytest.raises(ConfigError) as excinfo:
        validate_config({**TINY, **override})
    assert excinfo.value.field == field


def test_config_error_is_value_error() -> None:
    """Test ConfigError can be caught as ValueError."""
    with pytest.raises(ValueError, match="num_classes"):
        validate_config({**TINY, "num_classes": -1})


def test_validate_returns_same_instance() -> None:
    """Test a valid MIAConfig is returned unchanged."""
    cfg = MIAConfig.tiny()
    assert validate_config(cfg) is cfg


def test_rl_frozen_longer_than_stage_rejected() -> None:
    """Test the RL frozen phase cannot exceed the RL stage."""
    with pytest.raises(ConfigError, match="rl_frozen_epochs"):
        MIAConfig.tiny(training={"rl_frozen_epochs": 5, "rl_epochs": 3})


def test_tau_schedule_endpoints() -> None:
    """Test the annealed temperature starts at tau_start and ends at tau_end."""
    cfg = MIAConfig.tiny()
    assert cfg.tau_at(0, 10) == pytest.approx(5.0)
    assert cfg.tau_at(9, 10) == pytest.approx(0.5)
    assert cfg.tau_at(0, 10) > cfg.tau_at(5, 10) > cfg.tau_at(9, 10)
    assert cfg.tau_at(0, 1) == pytest.approx(0.5)


def test_config_hash_tracks_content() -> None:
    """Test the hash is stable and changes with any field."""
    assert config_hash(MIAConfig.tiny()) == config_hash(MIAConfig.tiny())
    assert config_hash(MIAConfig.tiny()) != config_hash(MIAConfig.tiny(beta=0.25))


def test_save_and_load_config(tmp_path: Path) -> None:
    """Test a saved config loads back equal, with overrides applied."""
    cfg = MIAConfig.tiny(seed=3)
    path = save_config(cfg, tmp_path / "cfg.json")
    assert load_config(path) == cfg

    loaded = load_config(path, beta=0.25, target_flops_ratio=None, training={"rl_epochs": 12})
    assert loaded.beta == 0.25
    assert loaded.target_flops_ratio == cfg.target_flops_ratio
    assert loaded.training.rl_epochs == 12


def test_load_config_missing_file(tmp_path: Path) -> None:
    """Test a missing config file raises FileNotFoundError."""
    with pytest.raises(FileNotFoundError, match="Config file not found"):
        load_config(tmp_path / "nope.json")


def test_load_config_invalid_json(tmp_path: Path) -> None:
    """Test malformed JSON raises ConfigError."""
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path)


def test_load_config_unknown_key(tmp_path: Path) -> None:
    """Test unknown keys are rejected."""
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**TINY, "depth_multiplier": 2}))
    with pytest.raises(ConfigError) as excinfo:
        load_config(path)
    assert excinfo.value.field == "depth_multiplier"


def test_attack_defaults() -> None:
    """Test default attack strengths and the PGD step size."""
    pgd = AttackSpec.default("pgd_linf")
    assert pgd.epsilon == 0.002
    assert pgd.steps == 10
    assert pgd.resolved_step_size == pytest.approx(0.0005)
    assert AttackSpec.default("fgsm_l2").epsilon == 0.03


def test_dataset_spec_requires_path() -> None:
    """Test non-synthetic sources need a path."""
    with pytest.raises(ValueError, match="requires a path"):
        DatasetSpec(source="packed")
