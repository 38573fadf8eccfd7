"""Flat ``key = value`` config files.

Lines are ``key = value``; ``#`` starts a comment. Tuples are comma
separated. Keys not declared by the command's config are rejected.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        out[key] = value
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_kv(text, str(path))


def _coerce(key: str, value: str, default: Any):
    try:
        if isinstance(default, bool):
            v = value.lower()
            if v in _TRUE:
                return True
            if v in _FALSE:
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else str
            parts = [p.strip() for p in value.split(",") if p.strip()]
            return tuple(elem(p) for p in parts)
        return value
    except ValueError:
        raise ConfigError(f"bad value for key '{key}': {value!r}") from None


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def apply_overrides(cfg, values: dict[str, str], extra: dict[str, Any] | None = None):
    """Return ``(cfg', extra')`` with ``values`` applied.

    ``extra`` holds non-dataclass keys accepted by a command (name -> default).
    """
    extra = dict(extra or {})
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    updates = {}
    for key, value in values.items():
        if key in fields:
            updates[key] = _coerce(key, value, getattr(cfg, key))
        elif key in extra:
            extra[key] = _coerce(key, value, extra[key]) if extra[key] is not None else value
        else:
            raise ConfigError(f"unknown config key '{key}'")
    return dataclasses.replace(cfg, **updates), extra


def dump(items: Iterable[tuple[str, Any]]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in items)


def resolved_text(cfg, extra: dict[str, Any] | None = None) -> str:
    items = [(f.name, getattr(cfg, f.name)) for f in dataclasses.fields(cfg)]
    items += sorted((extra or {}).items())
    return dump((k, v) for k, v in items if v is not None)
