"""Flat ``key = value`` config files with sectioned keys (``sim.*``, ``model.*``, ``train.*``).

Example::

    # comments start with '#'
    sim.count = 1150
    sim.splits = 850,150,150
    model.image_size = 64
    train.epochs = 30
"""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

SECTIONS = ("sim", "enc", "model", "train")


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in out or not name:
            raise ConfigError(f"line {lineno}: unknown key {key!r} (sections: {', '.join(SECTIONS)})")
        out[section][name] = value
    return out


def load_config(path: str | Path) -> dict[str, dict[str, str]]:
    return parse_config_text(Path(path).read_text())


def _coerce(value: str, tp, name: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value.lower() in ("none", ""):
            return None
        return _coerce(value, args[0], name)
    if origin is tuple:
        args = typing.get_args(tp)
        items = [v.strip() for v in value.split(",") if v.strip()]
        elem = args[0]
        return tuple(_coerce(v, elem, name) for v in items)
    if tp is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: not a boolean: {value!r}")
    try:
        return tp(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot parse {value!r} as {getattr(tp, '__name__', tp)}") from exc


def apply_overrides(obj, values: dict[str, str], section: str = ""):
    """Return a copy of dataclass ``obj`` with string ``values`` coerced onto its fields."""
    hints = typing.get_type_hints(type(obj))
    fields = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"unknown key {section + '.' if section else ''}{key}")
        changes[key] = _coerce(raw, hints[key], key)
    return dataclasses.replace(obj, **changes)
