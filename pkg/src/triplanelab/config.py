"""Flat ``key = value`` config files and named random streams."""

from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict:
    out = {}
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


def load_kv(path) -> dict:
    return parse_kv(Path(path).read_text())


def format_kv(values: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def write_kv(values: dict, path) -> None:
    Path(path).write_text(format_kv(values))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def coerce(raw: str, default):
    """Convert a string to the type of ``default``."""
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = raw.replace(",", " ").split()
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in items)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


STREAMS = ("data", "init", "noise", "dropout")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per named sub-stream of a global seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def stream_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(0, 2**31 - 1))
