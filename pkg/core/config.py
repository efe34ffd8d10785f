# core/config.py

import json
import os
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

from utils.errors import ConfigurationError
from utils.types import ModelConfig, TrainRun

# Load variables from .env file
load_dotenv(dotenv_path='.env')

_DTYPES = {"float32": np.float32, "float64": np.float64}
_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}


class Config:
    def __init__(self):
        # Logging configuration
        self.log_level = os.getenv("SGUNET_LOG_LEVEL", "INFO").upper()
        if self.log_level not in _LEVELS:
            raise ConfigurationError(f"Invalid SGUNET_LOG_LEVEL: {self.log_level}")
        self.log_dir = Path(os.getenv("SGUNET_LOG_DIR", "logs"))
        self.log_to_file = os.getenv("SGUNET_LOG_TO_FILE", "true").lower() == "true"

        # Output locations
        self.runs_dir = Path(os.getenv("SGUNET_RUNS_DIR", "runs"))

        # Worker processes for dataset generation
        try:
            self.workers = int(os.getenv("SGUNET_WORKERS", "1"))
        except ValueError:
            raise ConfigurationError("SGUNET_WORKERS must be an integer.")
        if self.workers < 1:
            raise ConfigurationError("SGUNET_WORKERS must be >= 1.")

        # Tensor precision
        dtype_name = os.getenv("SGUNET_DTYPE", "float32").lower()
        if dtype_name not in _DTYPES:
            raise ConfigurationError(
                f"Invalid SGUNET_DTYPE: {dtype_name}. Must be 'float32' or 'float64'."
            )
        self.dtype = _DTYPES[dtype_name]


def _read_json(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        with open(path, "r") as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"Config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config file {path} is not valid JSON: {e}")
    if not isinstance(payload, dict):
        raise ConfigurationError(f"Config file {path} must hold a JSON object")
    return payload


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> TrainRun:
    """
    Build a TrainRun from an optional JSON file and flag overrides.

    Precedence: model defaults < file < overrides. Override keys prefixed
    with ``config.`` address ModelConfig fields.
    """
    payload: Dict[str, Any] = _read_json(path) if path else {}
    model_payload = dict(payload.pop("config", {}) or {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("config."):
            model_payload[key[len("config."):]] = value
        elif key == "lambda_reg":
            payload.pop("lambda", None)
            payload[key] = value
        else:
            payload[key] = value
    try:
        payload["config"] = ModelConfig(**model_payload)
        return TrainRun(**payload)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid run configuration: {e}")


def load_model_config(path: Union[str, Path]) -> ModelConfig:
    """Read a ModelConfig from a JSON file (bare object or a run file's 'config')."""
    payload = _read_json(path)
    payload = payload.get("config", payload)
    try:
        return ModelConfig(**payload)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid model configuration in {path}: {e}")


def parse_model_overrides(items: Optional[Sequence[str]]) -> Dict[str, Any]:
    """
    Turn ``KEY=VALUE`` strings into ``config.KEY`` overrides for load_run_config.

    Values are read as JSON when they parse (numbers, lists, booleans) and kept
    as plain strings otherwise.
    """
    overrides: Dict[str, Any] = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"Model override must look like KEY=VALUE, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[f"config.{key}"] = value
    return overrides
