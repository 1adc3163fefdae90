"""Flat ``key = value`` run configuration.

Blank lines and lines starting with ``#`` are ignored. Every key below has a
default except the paths ``manifest`` and ``checkpoint_out``. Unknown keys are
rejected so that typos do not silently fall back to defaults.
"""
from __future__ import annotations

import math
from pathlib import Path

from .emotion_space import DEFAULT_PROTOTYPES, EMOTION_NAMES, Emotion, VAThresholds
from .keypoint_io import NormalizationConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> tuple:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "default", "none") else float(text)


def _opt_str(text: str):
    return text.strip() or None


def _pair(text: str) -> tuple:
    v, a = (float(p) for p in text.split(","))
    return (v, a)


SCHEMA = {
    "task": (str, "classify"),
    "manifest": (_opt_str, None),
    "checkpoint_out": (_opt_str, None),
    "report_out": (_opt_str, None),
    "log_out": (_opt_str, None),
    "epochs": (int, 50),
    "batch_size": (int, 32),
    "seed": (int, 0),
    "workers": (int, 1),
    "min_validity": (float, 0.5),
    "topology": (str, "plain"),
    "hidden": (_int_tuple, (512, 256, 128)),
    "optimizer": (str, "adam"),
    "lr": (_opt_float, None),
    "momentum": (float, 0.0),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "scheduler": (str, "constant"),
    "max_lr": (float, 0.01),
    "pct_start": (float, 0.3),
    "div_factor": (float, 25.0),
    "final_div_factor": (float, 1e4),
    "plateau_factor": (float, 0.1),
    "plateau_patience": (int, 10),
    "plateau_mode": (str, "min"),
    "anchor": (int, 1),
    "image_diagonal": (float, math.hypot(1920.0, 1080.0)),
    "use_confidence": (_bool, True),
    "neutral_radius": (float, 0.15),
}
for _e in Emotion:
    SCHEMA[f"prototype.{_e.label}"] = (_pair, DEFAULT_PROTOTYPES[_e])

REQUIRED_PATHS = ("manifest", "checkpoint_out")
TRAIN_KEYS = tuple(TrainConfig.__dataclass_fields__)


def defaults() -> dict:
    return {k: default for k, (_, default) in SCHEMA.items()}


def parse_lines(lines, source: str = "<config>") -> dict:
    raw = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        raw[key] = value.strip()
    return raw


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the file, then ``overrides`` (all values as text)."""
    raw = {}
    if path is not None:
        raw.update(parse_lines(Path(path).read_text(encoding="utf-8").splitlines(), str(path)))
    raw.update(overrides or {})
    cfg = defaults()
    for key, text in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        conv = SCHEMA[key][0]
        try:
            cfg[key] = conv(text)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {text!r} ({e})") from None
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})
    except ValueError as e:
        raise ConfigError(str(e)) from None


def normalization_config(cfg: dict) -> NormalizationConfig:
    return NormalizationConfig(anchor=cfg["anchor"], image_diagonal=cfg["image_diagonal"],
                               use_confidence=cfg["use_confidence"])


def va_thresholds(cfg: dict) -> VAThresholds:
    protos = {Emotion(i): cfg[f"prototype.{name}"] for i, name in enumerate(EMOTION_NAMES)}
    try:
        return VAThresholds(neutral_radius=cfg["neutral_radius"], prototypes=protos)
    except ValueError as e:
        raise ConfigError(str(e)) from None
