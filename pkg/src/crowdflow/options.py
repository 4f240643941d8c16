"""Dataclass config helpers: documented fields and strict dict loading."""
from __future__ import annotations

import dataclasses
import typing
from typing import Any


class ConfigError(ValueError):
    pass


def opt(default: Any = dataclasses.MISSING, unit: str = "-", help: str = "", factory=None):
    meta = {"unit": unit, "help": help}
    if factory is not None:
        return dataclasses.field(default_factory=factory, metadata=meta)
    return dataclasses.field(default=default, metadata=meta)


def from_dict(cls, data: dict | None, where: str = ""):
    """Build dataclass ``cls`` from ``data``; unknown keys are errors."""
    data = dict(data or {})
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {unknown}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in data.items():
        sub = hints.get(key)
        if dataclasses.is_dataclass(sub) and isinstance(value, dict):
            value = from_dict(sub, value, f"{where}.{key}" if where else key)
        elif isinstance(value, list) and _tuple_hint(sub):
            item = _item_dataclass(sub)
            if item is not None:
                value = tuple(from_dict(item, v, f"{where or cls.__name__}.{key}[{i}]")
                              if isinstance(v, dict) else v for i, v in enumerate(value))
            else:
                value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from exc


def _tuple_hint(hint) -> bool:
    if typing.get_origin(hint) is tuple or hint is tuple:
        return True
    return any(_tuple_hint(a) for a in typing.get_args(hint) if a is not type(None))


def _item_dataclass(hint):
    """Element type of ``tuple[X, ...]`` (possibly inside an Optional) when X is a dataclass."""
    for h in (hint, *typing.get_args(hint)):
        if typing.get_origin(h) is tuple:
            args = [a for a in typing.get_args(h) if a is not Ellipsis]
            if args and dataclasses.is_dataclass(args[0]):
                return args[0]
    return None


def to_dict(obj) -> dict:
    out = dataclasses.asdict(obj)
    return _listify(out)


def _listify(x):
    if isinstance(x, dict):
        return {k: _listify(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_listify(v) for v in x]
    return x


def describe(cls, prefix: str = "") -> list[str]:
    """One line per leaf key: ``section.key  [unit]  default=...  help``."""
    lines = []
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        name = f"{prefix}{f.name}"
        sub = hints.get(f.name)
        if dataclasses.is_dataclass(sub):
            lines.extend(describe(sub, name + "."))
            continue
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            default = f.default_factory()  # type: ignore[misc]
        else:
            default = "(required)"
        unit = f.metadata.get("unit", "-")
        lines.append(f"  {name:<34} [{unit}] default={default!r}  {f.metadata.get('help', '')}".rstrip())
        item = _item_dataclass(sub)
        if item is not None:
            lines.extend(describe(item, name + "[]."))
    return lines
