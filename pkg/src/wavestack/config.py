"""Pipeline configuration: JSON schema, dotted-key overrides, object builders.

The schema (all keys optional in user files; omitted keys take these defaults):

    {
      "rates": [24000, 6000],
      "features": {"sample_rate": 24000, "n_mels": 80, "fft_size": 2048,
                    "hop_length": 300, "f_min": 20.0, "f_max": null,
                    "floor": 1e-5},
      "net": {"n_layers": 24, "layers_per_block": 8, "residual_channels": 64,
               "step_embed_dim": 128, "step_hidden_dim": 512},
      "train_schedule": {"shape": "linear", "start": 1e-4, "end": 0.05,
                          "steps": 50},
      "infer_schedule": {"betas": [0.0001, 0.001, 0.01, 0.05, 0.2, 0.5]},
      "train": {"batch_size": 16, "learning_rate": 2e-4, "max_steps": 1000,
                 "segment_length": 7200, "adam_beta1": 0.9,
                 "adam_beta2": 0.999, "adam_eps": 1e-8, "seed": 0,
                 "weighted_loss": true, "dtype": "float64",
                 "checkpoint_every": 10000},
      "paths": {"data_dir": null, "out_dir": null}
    }

Unknown keys anywhere are rejected, so typos fail loudly.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .audio import FeatureConfig
from .diffusion import linear_betas
from .errors import ConfigError
from .net import NetConfig
from .pipeline import TrainConfig
from .resample import StageRates


def default_config() -> dict:
    return {
        "rates": [24000, 6000],
        "features": {
            "sample_rate": 24000,
            "n_mels": 80,
            "fft_size": 2048,
            "hop_length": 300,
            "f_min": 20.0,
            "f_max": None,
            "floor": 1e-5,
        },
        "net": {
            "n_layers": 24,
            "layers_per_block": 8,
            "residual_channels": 64,
            "step_embed_dim": 128,
            "step_hidden_dim": 512,
        },
        "train_schedule": {"shape": "linear", "start": 1e-4, "end": 0.05, "steps": 50},
        "infer_schedule": {"betas": [0.0001, 0.001, 0.01, 0.05, 0.2, 0.5]},
        "train": {
            "batch_size": 16,
            "learning_rate": 2e-4,
            "max_steps": 1000,
            "segment_length": 7200,
            "adam_beta1": 0.9,
            "adam_beta2": 0.999,
            "adam_eps": 1e-8,
            "seed": 0,
            "weighted_loss": True,
            "dtype": "float64",
            "checkpoint_every": 10000,
        },
        "paths": {"data_dir": None, "out_dir": None},
    }


def _merge(base: dict, user: dict, prefix: str = "") -> dict:
    merged = copy.deepcopy(base)
    for key, value in user.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict) and base[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} must be an object")
            merged[key] = _merge(base[key], value, prefix=f"{dotted}.")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path=None, overrides=()) -> dict:
    """Defaults, overlaid with an optional JSON file, then dotted overrides."""
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = _merge(cfg, user)
    for item in overrides:
        cfg = apply_override(cfg, item)
    return cfg


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply one 'dotted.key=value' override; values parse as JSON literals
    with a fallback to plain strings."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = {}
    leaf = node
    parts = dotted.strip().split(".")
    for part in parts[:-1]:
        leaf[part] = {}
        leaf = leaf[part]
    leaf[parts[-1]] = value
    return _merge(cfg, node)


def dump_config(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2) + "\n")


def feature_config(cfg: dict) -> FeatureConfig:
    return FeatureConfig(**cfg["features"])


def stage_rates(cfg: dict) -> StageRates:
    return StageRates(tuple(cfg["rates"]))


def net_config(cfg: dict) -> NetConfig:
    return NetConfig(**cfg["net"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def train_betas(cfg: dict) -> np.ndarray:
    sched = cfg["train_schedule"]
    if sched.get("shape", "linear") != "linear":
        raise ConfigError(f"unsupported train schedule shape {sched.get('shape')!r}")
    return linear_betas(sched["start"], sched["end"], sched["steps"])


def infer_betas(cfg: dict) -> np.ndarray:
    return np.asarray(cfg["infer_schedule"]["betas"], dtype=np.float64)


def train_dtype(cfg: dict):
    name = cfg["train"]["dtype"]
    try:
        dtype = np.dtype(name)
    except TypeError as exc:
        raise ConfigError(f"unknown dtype {name!r}") from exc
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"training dtype must be float32 or float64, got {name!r}")
    return dtype
