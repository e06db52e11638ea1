#!/usr/bin/env python3
"""
Tests for JSON config loading, overrides and environment settings
"""

import json
import sys
from pathlib import Path

import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.cli import RunConfig
from src.config import (
    build_config,
    from_dict,
    get_worker_count,
    load_json_config,
    to_dict,
    write_resolved_config,
)
from src.errors import ConfigError
from src.loss import LossConfig
from src.model import ModelConfig
from src.phantom import PhantomConfig


def test_from_dict_fills_defaults_and_coerces():
    config = from_dict(PhantomConfig, {"n_patients": 3, "b_values": [0, 500], "domain_shift": {"blur_sigma": 0}})
    assert config.n_patients == 3
    assert config.b_values == [0.0, 500.0]
    assert all(isinstance(b, float) for b in config.b_values)
    assert config.domain_shift.blur_sigma == 0.0
    assert config.slices_per_patient == PhantomConfig().slices_per_patient
    assert isinstance(config, PhantomConfig)


def test_partial_section_keeps_field_defaults():
    config = from_dict(RunConfig, {"source_train": {"epochs": 1}})
    assert config.source_train.epochs == 1
    assert config.source_train.augment is True
    assert config.source_train.loss.family == "modified"
    assert config.source_train.loss.x == 0.0
    assert config.finetune.augment is False


def test_later_layers_win():
    config = build_config(ModelConfig, {"n_levels": 2, "base_channels": 4}, {"n_levels": 3})
    assert config == ModelConfig(n_levels=3, base_channels=4)


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="domain_shift.blurr"):
        from_dict(PhantomConfig, {"domain_shift": {"blurr": 1}})
    with pytest.raises(ConfigError, match=r"unknown config key\(s\): seeds, zones"):
        build_config(RunConfig, {"seeds": [0]}, {"zones": "WG"})


def test_wrong_types_are_rejected():
    with pytest.raises(ConfigError):
        from_dict(PhantomConfig, {"n_patients": "many"})
    with pytest.raises(ConfigError):
        from_dict(LossConfig, {"false_positive_term": "maybe"})
    with pytest.raises(ConfigError):
        from_dict(PhantomConfig, {"b_values": 400})
    with pytest.raises(ConfigError):
        from_dict(PhantomConfig, [1, 2])


def test_validation_errors_become_config_errors():
    with pytest.raises(ConfigError):
        from_dict(LossConfig, {"x": 2.0})


def test_to_dict_round_trip():
    config = PhantomConfig(n_patients=5)
    assert from_dict(PhantomConfig, to_dict(config)) == config


def test_overrides():
    config = build_config(RunConfig, {"phantom": {"n_patients": 8}},
                          overrides=["phantom.n_patients=2", "model.n_levels=2", "finetune.loss.x=0.3"])
    assert config.phantom.n_patients == 2
    assert config.model.n_levels == 2
    assert config.finetune.loss.x == 0.3
    assert config.model.base_channels == ModelConfig().base_channels

    assert build_config(RunConfig, overrides=["zone=TZ"]).zone == "TZ"
    assert build_config(RunConfig, overrides=["source_split=[1,1,1]"]).source_split == [1.0, 1.0, 1.0]

    with pytest.raises(ConfigError):
        build_config(RunConfig, overrides=["zone.x=1"])
    with pytest.raises(ConfigError):
        build_config(RunConfig, overrides=["no-equals-sign"])
    with pytest.raises(ConfigError, match="phantom.bogus"):
        build_config(RunConfig, overrides=["phantom.bogus=1"])
    with pytest.raises(ConfigError):
        build_config(RunConfig, overrides=["zone=XX"])


def test_load_json_config(tmp_path):
    assert load_json_config(None) == {}
    path = tmp_path / "plan.json"
    path.write_text('{"zone": "TZ"}', encoding='utf-8')
    assert load_json_config(str(path)) == {"zone": "TZ"}
    path.write_text('[1, 2]', encoding='utf-8')
    with pytest.raises(ConfigError):
        load_json_config(str(path))
    with pytest.raises(ConfigError):
        load_json_config(str(tmp_path / "missing.json"))


def test_write_resolved_config(tmp_path):
    path = write_resolved_config(LossConfig(x=0.4), str(tmp_path), extra={"command": "finetune"})
    payload = json.loads(path.read_text(encoding='utf-8'))
    assert payload["command"] == "finetune"
    assert payload["config"]["x"] == 0.4


def test_worker_count(monkeypatch):
    monkeypatch.delenv("WORKBENCH_WORKERS", raising=False)
    assert get_worker_count() == 1
    monkeypatch.setenv("WORKBENCH_WORKERS", "3")
    assert get_worker_count() == 3
    monkeypatch.setenv("WORKBENCH_WORKERS", "zero")
    with pytest.raises(ConfigError):
        get_worker_count()
    monkeypatch.setenv("WORKBENCH_WORKERS", "0")
    with pytest.raises(ConfigError):
        get_worker_count()
