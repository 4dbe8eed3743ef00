"""Flat ``key = value`` config files and typed override merging.

Precedence is command line > config file > built-in defaults.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .train import TrainConfig

ALIASES = {"lambda": "lam", "eps": "epsilon", "k": "k_neighbors"}


class ConfigError(ValueError):
    pass


def _field_types() -> dict[str, type]:
    hints = typing.get_type_hints(TrainConfig)
    out = {}
    for f in dataclasses.fields(TrainConfig):
        t = hints[f.name]
        args = [a for a in typing.get_args(t) if a is not type(None)]
        out[f.name] = args[0] if args else t
    return out


def coerce(key: str, raw: str):
    key = ALIASES.get(key, key)
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    text = raw.strip()
    if text.lower() in ("none", "null", ""):
        return key, None
    typ = types[key]
    try:
        if typ is bool:
            if text.lower() in ("true", "yes", "1", "on"):
                return key, True
            if text.lower() in ("false", "no", "0", "off"):
                return key, False
            raise ValueError(text)
        return key, typ(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = line.split("=", 1)
        k, v = coerce(key.strip(), raw)
        values[k] = v
    return values


def read_config(path: str | Path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def build_config(file_values: dict | None = None, cli_values: dict | None = None) -> TrainConfig:
    merged = {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (cli_values or {}).items() if v is not None})
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def render_config(config: TrainConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        lines.append(f"{k} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
