"""Key-value config files.

One ``key = value`` per line, ``#`` starts a comment. Values are typed by
the target dataclass field: int, float, bool (true/false/1/0/yes/no),
str, or comma-separated lists of int/float/str. An empty list is written
as ``key =``.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def _scalar(tp, text: str, key: str):
    try:
        if tp is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None


def coerce(tp, text: str, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        if text.lower() in ("", "none", "null"):
            return None
        return coerce(inner[0], text, key)
    if origin in (list, tuple):
        elem = args[0] if args else str
        items = [s.strip() for s in text.split(",") if s.strip()]
        vals = [_scalar(elem, s, key) for s in items]
        return tuple(vals) if origin is tuple else vals
    return _scalar(tp, text, key)


def build_dataclass(cls, values: dict[str, str]):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: coerce(hints[k], v, k) for k, v in values.items()}
    return cls(**kwargs)


def load_config(cls, path=None, overrides: dict[str, str] | None = None):
    values = parse_kv(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return build_dataclass(cls, values)


def dump_config(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if v is None:
            v = "none"
        elif isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, (list, tuple)):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
