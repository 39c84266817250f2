"""Line-oriented ``key = value`` run configuration with a fixed schema."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .data import ConfigError
from .model import ModelConfig
from .training import TrainConfig


def _split(v: str) -> tuple:
    parts = tuple(float(x) for x in v.split(","))
    if len(parts) != 3:
        raise ValueError("expected three comma-separated ratios")
    return parts


_MODEL_KEYS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_PARSERS = {"int": int, "float": float, "str": str, "tuple": _split}

SCHEMA: dict[str, callable] = {}
for _name, _type in {**_MODEL_KEYS, **_TRAIN_KEYS}.items():
    SCHEMA[_name] = _PARSERS[str(_type)]
# timing = 0 leaves the history's seconds column empty so reruns compare byte-for-byte
SCHEMA.update({"dataset": str, "out": str, "timing": int})


def parse_lines(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def validate(raw: dict) -> dict:
    cfg = {}
    for k, v in raw.items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key {k!r}")
        try:
            cfg[k] = SCHEMA[k](v) if isinstance(v, str) else v
        except ValueError as exc:
            raise ConfigError(f"bad value for {k!r}: {v!r} ({exc})") from None
    return cfg


def load_run_config(path: str | None, overrides: dict | None = None) -> dict:
    raw = parse_lines(Path(path).read_text(), str(path)) if path else {}
    raw.update(overrides or {})
    return validate(raw)


def split_configs(cfg: dict, N: int, steps_per_day: int) -> tuple[ModelConfig, TrainConfig]:
    missing = [k for k in ("T", "P") if k not in cfg]
    if missing:
        raise ConfigError(f"missing required key {missing[0]!r}")
    m = {k: v for k, v in cfg.items() if k in _MODEL_KEYS}
    m.setdefault("N", N)
    m.setdefault("steps_per_day", steps_per_day)
    t = {k: v for k, v in cfg.items() if k in _TRAIN_KEYS}
    return ModelConfig(**m), TrainConfig(**t)


def render(cfg: dict) -> str:
    lines = []
    for k in sorted(cfg):
        v = cfg[k]
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
