"""Flat ``key=value`` configuration files.

Blank lines and lines starting with ``#`` are ignored. Keys are
case-sensitive; later duplicates override earlier ones.
"""

from __future__ import annotations

import os

from .exceptions import ConfigError


def parse_kv(text: str, source: str = "<string>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def read_kv(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), source=os.fspath(path))


def require(cfg: dict, key: str, kind=float, default=None):
    """Fetch ``cfg[key]`` converted by ``kind``; missing without default is an error."""
    if key not in cfg:
        if default is not None:
            return default
        raise ConfigError(f"missing required key '{key}'", key=key)
    raw = cfg[key]
    if not isinstance(raw, str):
        return kind(raw)
    try:
        if kind is int:
            return int(raw, 0)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for '{key}': {raw!r} ({exc})", key=key) from None


def optional(cfg: dict, key: str, kind=float):
    if key not in cfg:
        return None
    return require(cfg, key, kind)


def check_known(cfg: dict, known) -> None:
    unknown = sorted(set(cfg) - set(known))
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'", key=unknown[0])
