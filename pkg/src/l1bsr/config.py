"""Dataclass <-> JSON helpers with strict unknown-key rejection."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .errors import ConfigError

__all__ = ["from_dict", "to_dict", "load_json", "dump_json"]


def from_dict(cls, doc: dict | None, context: str = ""):
    """Build a dataclass from a dict, recursing into dataclass fields.

    Unknown keys raise :class:`ConfigError`; missing keys take defaults.
    """
    doc = dict(doc or {})
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        where = f" in {context}" if context else ""
        raise ConfigError(f"unknown config key(s){where}: {sorted(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in doc:
            continue
        value = doc[name]
        if dataclasses.is_dataclass(f.type) if isinstance(f.type, type) else False:
            value = from_dict(f.type, value, context=f"{context}.{name}" if context else name)
        elif isinstance(value, dict) and isinstance(f.default_factory, type) \
                and dataclasses.is_dataclass(f.default_factory):
            value = from_dict(f.default_factory, value,
                              context=f"{context}.{name}" if context else name)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config for {cls.__name__}: {exc}") from exc


def to_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def load_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc


def dump_json(path, doc: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
