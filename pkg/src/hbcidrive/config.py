"""Plain-text ``key = value`` configuration files.

Files may be split into ``[section]`` blocks; ``#`` starts a comment. Every
value remembers its line so type errors can point back at the file.
"""
from __future__ import annotations

import dataclasses
import typing


class ConfigError(ValueError):
    pass


class Entry(str):
    """A raw string value that carries the line it was read from."""

    lineno: int = 0

    def __new__(cls, value, lineno=0):
        obj = super().__new__(cls, value)
        obj.lineno = lineno
        return obj


def parse_key_values(text, source="<config>"):
    """Parse into ``{section: {key: Entry}}``; keys before any header go in ``""``."""
    sections = {"": {}}
    current = sections[""]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"{source}:{lineno}: malformed section header {raw!r}")
            current = sections.setdefault(line[1:-1].strip(), {})
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in current:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        current[key] = Entry(value, lineno)
    return sections


def _convert(value, kind):
    if kind is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind in (int, float, str):
        return kind(value)
    origin = typing.get_origin(kind)
    if origin is tuple:
        args = typing.get_args(kind)
        items = [v.strip() for v in value.split(",") if v.strip()]
        elem = args[0] if args else float
        return tuple(_convert(v, elem) for v in items)
    raise ValueError(f"unsupported field type {kind!r}")


def coerce_dataclass(base, values, source="<config>"):
    """Return ``base`` with fields overridden by the raw string ``values``."""
    hints = typing.get_type_hints(type(base))
    known = {f.name for f in dataclasses.fields(base)}
    changes = {}
    for key, raw in values.items():
        where = f"{source}:{getattr(raw, 'lineno', 0)}"
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r} for {type(base).__name__}")
        try:
            changes[key] = _convert(str(raw), hints[key])
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    try:
        return dataclasses.replace(base, **changes)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def dataclass_to_text(obj, section=None):
    lines = [f"[{section}]"] if section else []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
