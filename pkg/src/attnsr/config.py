"""Flat ``key = value`` config files mapped onto (nested) dataclasses.

Format, one setting per line::

    # comment
    learning_rate = 1e-4
    betas = 0.9, 0.99
    pass1.sigma = 0.2, 3.0

Nested dataclass fields are addressed with dotted keys. Tuples are written as
comma-separated values. Unknown keys raise :class:`ConfigError` naming the key.
"""
from __future__ import annotations

import dataclasses
import os
import typing
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


def parse_lines(text: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        values[key] = value
    return values


def _convert(key: str, text: str, tp):
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        items = [s.strip() for s in text.split(",") if s.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(key, s, args[0]) for s in items)
        if len(items) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_convert(key, s, a) for s, a in zip(items, args))
    if origin is typing.Union:  # Optional[X]
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.lower() in ("", "none"):
            return None
        return _convert(key, text, args[0])
    try:
        if tp is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None
    return text


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


def _merge(default, values: dict[str, str], prefix: str):
    hints = typing.get_type_hints(type(default))
    changes = {}
    known = set()
    for field in dataclasses.fields(default):
        key = prefix + field.name
        tp = hints[field.name]
        if dataclasses.is_dataclass(tp):
            sub = {k: v for k, v in values.items() if k.startswith(key + ".")}
            if sub:
                changes[field.name] = _merge(getattr(default, field.name), sub, key + ".")
                known.update(sub)
        elif key in values:
            changes[field.name] = _convert(key, values[key], tp)
            known.add(key)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    return dataclasses.replace(default, **changes)


def to_mapping(obj, prefix: str = "") -> dict[str, str]:
    out = {}
    for field in dataclasses.fields(obj):
        value = getattr(obj, field.name)
        if dataclasses.is_dataclass(value):
            out.update(to_mapping(value, prefix + field.name + "."))
        else:
            out[prefix + field.name] = _format(value)
    return out


def load(cls, path: str | os.PathLike, base=None):
    """Read a config file; keys override ``base`` (or ``cls()`` defaults)."""
    values = parse_lines(Path(path).read_text())
    return _merge(base if base is not None else cls(), values, "")


def loads(cls, text: str, base=None):
    return _merge(base if base is not None else cls(), parse_lines(text), "")


def dumps(obj) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_mapping(obj).items())


def save(obj, path: str | os.PathLike) -> None:
    Path(path).write_text(dumps(obj))
