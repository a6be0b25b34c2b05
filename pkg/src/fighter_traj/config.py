"""Flat ``key=value`` run configuration shared by every subcommand."""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (default, help)
DEFAULTS: dict[str, tuple[object, str]] = {
    "seed": (1, "single source of all randomness"),
    "m": (3, "input features per time step"),
    "conv_channels": (16, "temporal convolution output channels"),
    "hidden": (32, "LSTM hidden size"),
    "attn_dim": (16, "attention score dimension"),
    "grid_extent_m": (5000.0, "half-width of the social neighbourhood cube, meters"),
    "grid_cells": (4, "social grid cells per axis"),
    "social_dim": (0, "social embedding size, 0 = hidden"),
    "pool": (True, "max-pool the convolution output over time"),
    "social_per_step": (False, "pool neighbours at every encoder step"),
    "t_obs": (8, "observed steps per window"),
    "t_pred": (8, "predicted steps per window"),
    "attention": (True, "input attention on/off"),
    "social": (True, "social pooling on/off"),
    "lr0": (1e-4, "initial learning rate"),
    "decay": (0.5, "learning-rate decay factor"),
    "decay_period": (20, "epochs between decays"),
    "batch": (64, "windows per mini-batch"),
    "epochs": (100, "training epochs"),
    "clip_norm": (0.0, "global gradient-norm clip, 0 disables"),
    "dt_s": (1.0, "resampling step, seconds"),
    "lowpass_alpha": (0.3, "exponential smoothing factor in (0, 1]"),
    "scale_m": (1000.0, "normalization scale, meters"),
    "stride": (1, "window start stride"),
    "split_ratio": (0.8, "training fraction of each scene's windows"),
}

_TRUE = {"true", "on", "yes", "1"}
_FALSE = {"false", "off", "no", "0"}


def parse_value(key: str, raw) -> object:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key][0]
    if not isinstance(raw, str):
        return type(default)(raw)
    text = raw.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected on/off or true/false, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def defaults() -> dict[str, object]:
    return {k: v for k, (v, _) in DEFAULTS.items()}


def read_config(path) -> dict[str, object]:
    """Parse a config file; errors name the offending line."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line.strip()!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return out


def resolve(path=None, overrides: dict | None = None) -> dict[str, object]:
    """Defaults, then the config file, then flag overrides."""
    cfg = defaults()
    if path is not None:
        cfg.update(read_config(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = parse_value(key, value)
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    names = {f.name for f in fields(ModelConfig)}
    return ModelConfig(**{k: cfg[k] for k in names})


def train_config(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: cfg[k] for k in names})


def dump(cfg: dict) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        return repr(v)

    return "".join(f"{k}={fmt(cfg[k])}\n" for k in DEFAULTS)
