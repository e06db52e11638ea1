#!/usr/bin/env python3
"""
Configuration helpers

JSON config files and `--set` overrides are merged onto dataclass schemas with
OmegaConf; unknown keys are rejected. Environment settings come from
a `.env` file (python-dotenv) or the process environment.
"""

import dataclasses
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv
from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import ConfigAttributeError, ConfigKeyError, OmegaConfBaseException

from .errors import ConfigError

# Load environment variables
load_dotenv()

WORKERS_ENV = "WORKBENCH_WORKERS"
RUN_SLOW_ENV = "WORKBENCH_RUN_SLOW"
RESOLVED_CONFIG_NAME = "resolved_config.json"


def get_worker_count(default: int = 1) -> int:
    """
    Number of parallel sweep workers

    Reads WORKBENCH_WORKERS from the environment (or .env file).

    Returns:
        Worker count (>= 1)
    """
    raw = os.getenv(WORKERS_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    if workers < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1, got {workers}")
    return workers


def slow_tests_enabled() -> bool:
    """True when the long phantom acceptance runs were requested"""
    return os.getenv(RUN_SLOW_ENV, "").strip().lower() in ("1", "true", "yes")


def _check_keys(node: DictConfig, data: Dict[str, Any], prefix: str = "") -> List[str]:
    """Dotted keys of data that the structured config does not declare"""
    unknown = []
    for key, value in data.items():
        name = f"{prefix}{key}"
        if key not in node:
            unknown.append(name)
            continue
        if isinstance(value, dict):
            child = node[key]
            if child is None:
                continue
            if not isinstance(child, DictConfig):
                raise ConfigError(f"{name}: not a section")
            unknown.extend(_check_keys(child, value, prefix=f"{name}."))
    return unknown


def _dotlist(overrides: Sequence[str]) -> Dict[str, Any]:
    for text in overrides:
        key = text.split("=", 1)[0].strip()
        if "=" not in text or not key:
            raise ConfigError(f"override must look like key=value, got {text!r}")
    return OmegaConf.to_container(OmegaConf.from_dotlist(list(overrides)))


def _error_key(error: OmegaConfBaseException, schema) -> str:
    return getattr(error, "full_key", None) or getattr(error, "key", None) or schema.__name__


def build_config(schema, *layers: Dict[str, Any], overrides: Optional[Sequence[str]] = None):
    """
    Build a dataclass config from dictionary layers and dotted overrides

    Layers are merged left to right over the dataclass defaults, then the
    `dotted.key=value` overrides are applied on top.

    Args:
        schema: Target dataclass type
        layers: JSON-like dictionaries (later layers win)
        overrides: `dotted.key=value` strings, e.g. from --set

    Returns:
        Instance of schema

    Raises:
        ConfigError: unknown keys, wrong value types, or failed validation
    """
    layers = list(layers)
    for layer in layers:
        if not isinstance(layer, dict):
            raise ConfigError(f"{schema.__name__}: expected an object, got {type(layer).__name__}")
    if overrides:
        layers.append(_dotlist(overrides))

    try:
        base = OmegaConf.structured(schema)
        OmegaConf.set_struct(base, True)
        unknown = []
        for layer in layers:
            unknown.extend(k for k in _check_keys(base, layer) if k not in unknown)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        merged = OmegaConf.merge(base, *layers)
        return OmegaConf.to_object(merged)
    except (ConfigKeyError, ConfigAttributeError) as e:
        raise ConfigError(f"unknown config key(s): {_error_key(e, schema)}")
    except OmegaConfBaseException as e:
        raise ConfigError(f"{_error_key(e, schema)}: {str(e).splitlines()[0]}")
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{schema.__name__}: {e}")


def from_dict(schema, data: Dict[str, Any]):
    """Build a dataclass config from one dictionary; missing fields keep their defaults"""
    return build_config(schema, data)


def to_dict(obj: Any) -> Dict[str, Any]:
    """Dataclass → plain JSON-compatible dictionary"""
    def convert(value):
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        if isinstance(value, list):
            return [convert(v) for v in value]
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        return value
    return convert(dataclasses.asdict(obj))


def load_json_config(path: Optional[str]) -> Dict[str, Any]:
    """
    Load a JSON config file (empty dict when no path given)

    Raises:
        ConfigError: file missing or not valid JSON
    """
    if not path:
        return {}
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {config_path}")
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{config_path}: invalid JSON ({e})")
    if not isinstance(data, dict):
        raise ConfigError(f"{config_path}: top level must be an object")
    return data


def write_resolved_config(config: Any, out_dir: str, extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write the fully resolved config echo used to reproduce a run

    Args:
        config: Dataclass or dictionary
        out_dir: Output directory
        extra: Additional entries (subcommand, input paths)

    Returns:
        Path of the written file
    """
    payload = to_dict(config) if dataclasses.is_dataclass(config) else dict(config)
    if extra:
        payload = {**extra, "config": payload}
    output = Path(out_dir)
    output.mkdir(parents=True, exist_ok=True)
    output_file = output / RESOLVED_CONFIG_NAME
    with open(output_file, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')
    return output_file
