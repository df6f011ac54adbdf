"""Training configuration: defaults, JSON file, then explicit overrides.

Precedence is defaults < config file < command-line flags.  Unknown keys and
wrong types are hard errors that name the offending key, so a typo in a
config file cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

VARIANTS = ("hip", "imi", "iihp")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    image_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64)
    variant: str = "hip"
    hog_bins: int = 9
    hog_cell: int = 8
    backbone: str = "seeded:1"
    epochs: int = 30
    lr: float = 5e-4
    disc_epochs: int = 20
    disc_lr: float = 5e-3
    batch_size: int = 32
    decay_marks: tuple[float, ...] = (0.4, 0.8)
    lam_m: float = 1.0
    lam_s: float = 1.0
    sc_axis: str = "channel"
    msgms_scales: int = 4
    weight_decay: float = 0.01

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(d["widths"])
        d["decay_marks"] = list(d["decay_marks"])
        return d


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_SEQUENCE_KEYS = {"widths": int, "decay_marks": float}


def _coerce(key: str, value):
    """Validate a raw (JSON or flag) value for `key`, returning the stored form."""
    if key not in _FIELDS:
        raise ValueError(f"unknown config key '{key}'")
    if key in _SEQUENCE_KEYS:
        elem = _SEQUENCE_KEYS[key]
        if not isinstance(value, (list, tuple)) or not value:
            raise ValueError(f"config key '{key}' must be a non-empty list")
        out = []
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ValueError(f"config key '{key}' has non-numeric element {v!r}")
            if elem is int and float(v) != int(v):
                raise ValueError(f"config key '{key}' has non-integer element {v!r}")
            out.append(elem(v))
        return tuple(out)
    want = type(getattr(TrainConfig(), key))
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"config key '{key}' must be an integer, got {value!r}")
        return value
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"config key '{key}' must be a number, got {value!r}")
        return float(value)
    if want is str:
        if not isinstance(value, str):
            raise ValueError(f"config key '{key}' must be a string, got {value!r}")
        return value
    raise ValueError(f"config key '{key}' has unsupported type")


def _validate(cfg: TrainConfig) -> TrainConfig:
    if cfg.variant not in VARIANTS:
        raise ValueError(f"config key 'variant' must be one of {VARIANTS}, got '{cfg.variant}'")
    if cfg.sc_axis not in ("channel", "spatial"):
        raise ValueError(f"config key 'sc_axis' must be 'channel' or 'spatial', got '{cfg.sc_axis}'")
    for key in ("image_size", "hog_bins", "hog_cell", "epochs", "disc_epochs", "batch_size", "msgms_scales"):
        if getattr(cfg, key) < 1:
            raise ValueError(f"config key '{key}' must be >= 1")
    for key in ("lr", "disc_lr"):
        if getattr(cfg, key) <= 0:
            raise ValueError(f"config key '{key}' must be > 0")
    for key in ("lam_m", "lam_s", "weight_decay"):
        if getattr(cfg, key) < 0:
            raise ValueError(f"config key '{key}' must be >= 0")
    if any(w < 1 for w in cfg.widths):
        raise ValueError("config key 'widths' must be positive")
    if any(not 0.0 < m < 1.0 for m in cfg.decay_marks):
        raise ValueError("config key 'decay_marks' entries must lie in (0, 1)")
    if any(b <= a for a, b in zip(cfg.decay_marks, cfg.decay_marks[1:])):
        raise ValueError("config key 'decay_marks' must be strictly increasing")
    if cfg.seed < 0:
        raise ValueError("config key 'seed' must be >= 0")
    return cfg


def load_config(path: str | None = None, overrides: dict | None = None) -> TrainConfig:
    merged: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError(f"config file {path} must hold a JSON object")
        for k, v in raw.items():
            merged[k] = _coerce(k, v)
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = _coerce(k, v)
    return _validate(TrainConfig(**merged))
