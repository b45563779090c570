"""INI run configuration checked against the dataclass schemas.

Sections map onto config dataclasses; each key must name a field and parse
as that field's type. Command-line flags override file values afterwards.
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .cfm import CFMConfig
from .codec import CodecConfig
from .model import ModelConfig
from .pipeline import DataConfig, ValidationConfig


class ConfigError(ValueError):
    """Unknown section or key, or a value that does not parse as the schema type."""


@dataclass(frozen=True)
class SamplerConfig:
    method: str = "euler"
    steps: int = 10
    members: int = 8
    rtol: float = 1e-2
    atol: float = 1e-3


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = tuple(v / 255.0 for v in (16, 74, 133, 160, 181, 219))
    pool: int = 16
    fss_n: int = 16


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    vae: CodecConfig = field(default_factory=CodecConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: CFMConfig = field(default_factory=CFMConfig)
    validation: ValidationConfig = field(default_factory=ValidationConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {f.name: f for f in fields(RunConfig)}


def _parse(raw: str, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    raw = raw.strip()
    try:
        if origin in (typing.Union, types.UnionType):
            inner = [a for a in args if a is not type(None)]
            if raw.lower() in ("", "none"):
                return None
            return _parse(raw, inner[0], where)
        if origin is tuple:
            parts = [p for p in raw.replace(",", " ").split() if p]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_parse(p, args[0], where) for p in parts)
            if len(parts) != len(args):
                raise ConfigError(f"{where}: expected {len(args)} values, got {len(parts)}")
            return tuple(_parse(p, a, where) for p, a in zip(parts, args))
        if tp is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {tp}") from exc
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def load_config(path=None, text: str | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        parser.read_string(p.read_text(), source=str(p))
    if text is not None:
        parser.read_string(text)
    base = RunConfig()
    updates = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        current = getattr(base, section)
        hints = _hints(type(current))
        values = {}
        for key, raw in parser.items(section):
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _parse(raw, hints[key], f"[{section}] {key}")
        try:
            updates[section] = dataclasses.replace(current, **values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    return dataclasses.replace(base, **updates)


def override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Replace fields of one section, skipping None values (unset flags)."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    try:
        return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc
