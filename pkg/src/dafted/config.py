"""Config serialization: dataclass configs to and from plain JSON-safe
dicts, with unknown keys rejected by name.

All experiment configs in this package are frozen dataclasses whose fields
are numbers, strings, bools, None, tuples, or nested config dataclasses.
That restriction keeps the conversion generic: ``to_plain`` walks values
into JSON-safe structures, ``from_plain`` rebuilds the dataclass and runs
its validators.
"""

from __future__ import annotations

import dataclasses
import typing

from .errors import ConfigError

__all__ = ["to_plain", "from_plain"]


def to_plain(obj):
    """Convert a config dataclass (or plain value) to JSON-safe data."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, (str, bool, int, float)) or obj is None:
        return obj
    raise ConfigError(f"value {obj!r} of type {type(obj).__name__} is not config-serializable")


def _tupleize(value):
    if isinstance(value, list):
        return tuple(_tupleize(v) for v in value)
    return value


def _dataclass_in(hint):
    """The dataclass type inside a possibly-Optional annotation, if any."""
    if dataclasses.is_dataclass(hint):
        return hint
    for arg in typing.get_args(hint):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def from_plain(cls, data, where: str = "config"):
    """Rebuild dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; valid keys: {sorted(names)}")
    kwargs = {}
    for name in names:
        if name not in data:
            continue
        value = data[name]
        nested = _dataclass_in(hints[name])
        if nested is not None and isinstance(value, dict):
            kwargs[name] = from_plain(nested, value, where=f"{where}.{name}")
        elif isinstance(value, bool):
            kwargs[name] = value
        elif isinstance(value, int) and hints[name] is float:
            kwargs[name] = float(value)
        else:
            kwargs[name] = _tupleize(value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
