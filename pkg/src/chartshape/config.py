"""Flat ``key=value`` config files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import os
import typing


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _coerce(tp, raw: str):
    origin = typing.get_origin(tp)
    if origin is tuple:
        (inner, *_rest) = typing.get_args(tp)
        return tuple(_coerce(inner, part) for part in raw.split(",") if part.strip())
    if tp is bool:
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1")
    if tp in (int, float, str):
        return tp(raw)
    raise TypeError(f"unsupported config field type {tp!r}")


def from_mapping(cls, values: dict[str, str], **overrides):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} key(s): {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v) for k, v in values.items()}
    kwargs.update(overrides)
    return cls(**kwargs)


def load_config(cls, path: str | os.PathLike | None, **overrides):
    values = {} if path is None else parse_kv(open(path, encoding="utf-8").read())
    return from_mapping(cls, values, **overrides)


def dump_config(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
