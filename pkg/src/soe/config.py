"""Flat ``key = value`` experiment configuration.

Every key has a type, a default and (where it matters) a valid range; unknown
keys are rejected. ``write_resolved`` materializes all defaults so a run
directory records exactly what was used.
"""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .fileio import atomic_write


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    kind: str  # int | float | str | bool | enum | intlist
    default: Any
    check: Callable[[Any], bool] | None = None
    hint: str = ""
    choices: tuple = ()


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


SCHEMA: tuple[Key, ...] = (
    Key("encoder.channels", "intlist", (16, 32, 64, 16),
        lambda v: len(v) == 4 and min(v) >= 1, "four widths >= 1"),
    Key("encoder.input_dim", "int", 64, lambda v: v >= 2, ">= 2"),
    Key("encoder.dropout_p", "float", 0.1, lambda v: 0 <= v < 1, "in [0, 1)"),
    Key("encoder.slope", "float", 0.2, _nonneg, ">= 0"),
    Key("vn.d_lift", "int", 128, _positive, ">= 1"),
    Key("vn.n_vn_layers", "int", 2, _nonneg, ">= 0"),
    Key("vn.d_out", "int", 128, _positive, ">= 1"),
    Key("loss.lambda", "float", 0.01, _nonneg, ">= 0"),
    Key("loss.mu", "float", 0.1, _nonneg, ">= 0"),
    Key("loss.eps", "float", 1e-6, _positive, "> 0"),
    Key("train.pretrain_epochs", "int", 50, lambda v: 0 <= v <= 50, "in [0, 50]"),
    Key("train.finetune_epochs", "int", 50, lambda v: 0 <= v <= 50, "in [0, 50]"),
    Key("train.batch_size", "int", 32, lambda v: v in (32, 64), "32 or 64"),
    Key("train.pretrain_lr", "float", 1e-2, lambda v: 1e-4 <= v <= 1e-2, "in [1e-4, 1e-2]"),
    Key("train.finetune_lr", "float", 1e-2, lambda v: 1e-4 <= v <= 1e-2, "in [1e-4, 1e-2]"),
    Key("train.momentum", "float", 0.9, lambda v: 0 <= v < 1, "in [0, 1)"),
    Key("train.grad_clip", "float", 1.0, _nonneg, ">= 0 (0 disables clipping)"),
    Key("train.lr_epochs_per_decade", "float", 0.0, _nonneg, ">= 0 (0 means one decade over the run)"),
    Key("train.angle_min_deg", "float", 0.0, lambda v: 0 <= v <= 180, "in [0, 180]"),
    Key("train.angle_max_deg", "float", 180.0, lambda v: 0 <= v <= 180, "in [0, 180]"),
    Key("train.task", "enum", "classify", choices=("classify", "regress")),
    Key("train.augment", "enum", "none", choices=("none", "mild", "right-angle")),
    Key("train.freeze_encoder", "bool", False),
    Key("train.seed", "int", 0, _nonneg, ">= 0"),
    Key("train.eval_seed", "int", 1234, _nonneg, ">= 0"),
    Key("data.n_samples", "int", 500, _positive, ">= 1"),
    Key("data.dim", "int", 64, lambda v: v in (16, 32, 64), "16, 32 or 64"),
    Key("data.seed", "int", 0, _nonneg, ">= 0"),
    Key("data.split_seed", "int", 0, _nonneg, ">= 0"),
    Key("data.v_threshold", "float", 0.11, _positive, "> 0"),
)
KEYS = {k.name: k for k in SCHEMA}


def _parse(key: Key, raw: str):
    raw = raw.strip()
    try:
        if key.kind == "int":
            return int(raw)
        if key.kind == "float":
            return float(raw)
        if key.kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if key.kind == "intlist":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if key.kind == "enum":
            if raw not in key.choices:
                raise ValueError(raw)
            return raw
        return raw
    except ValueError:
        expect = f"one of {', '.join(key.choices)}" if key.choices else f"a {key.kind}"
        raise ConfigError(f"{key.name}: expected {expect}, got {raw!r}") from None


def _format(key: Key, value) -> str:
    if key.kind == "intlist":
        return ",".join(str(v) for v in value)
    if key.kind == "bool":
        return "true" if value else "false"
    if key.kind == "float":
        return repr(float(value))
    return str(value)


class Config(Mapping):
    """Immutable resolved configuration (every key present)."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        resolved = {k.name: k.default for k in SCHEMA}
        for name, value in (values or {}).items():
            if name not in KEYS:
                raise ConfigError(f"unknown config key {name!r}")
            key = KEYS[name]
            if isinstance(value, str) and key.kind != "str":
                value = _parse(key, value)
            elif key.kind == "intlist":
                value = tuple(int(v) for v in value)
            resolved[name] = value
        for name, value in resolved.items():
            key = KEYS[name]
            if key.check is not None and not key.check(value):
                raise ConfigError(f"{name} = {_format(key, value)} is out of range (must be {key.hint})")
        if resolved["train.angle_min_deg"] > resolved["train.angle_max_deg"]:
            raise ConfigError("train.angle_min_deg must not exceed train.angle_max_deg")
        self._values = resolved

    def __getitem__(self, name):
        return self._values[name]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __repr__(self):
        return f"Config({self._values!r})"

    def replace(self, **overrides) -> "Config":
        """Copy with overrides; use ``__`` for ``.`` in keyword names (``loss__mu=0``)."""
        vals = dict(self._values)
        vals.update({k.replace("__", "."): v for k, v in overrides.items()})
        return Config(vals)

    def update(self, mapping: Mapping[str, Any]) -> "Config":
        vals = dict(self._values)
        vals.update(mapping)
        return Config(vals)


def parse_config(text: str, source: str = "<config>") -> Config:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        name, raw = (s.strip() for s in body.split("=", 1))
        if name not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {name!r}")
        if name in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {name!r}")
        try:
            values[name] = _parse(KEYS[name], raw)
            Config({name: values[name]})
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return Config(values)


def read_config(path) -> Config:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def format_config(cfg: Config) -> str:
    return "".join(f"{k.name} = {_format(k, cfg[k.name])}\n" for k in SCHEMA)


def write_resolved(cfg: Config, path) -> None:
    atomic_write(path, format_config(cfg))
