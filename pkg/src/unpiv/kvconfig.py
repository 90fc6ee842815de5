"""Plain-text key=value config parsing shared by the parameter dataclasses."""
from __future__ import annotations

from .errors import ConfigError


def parse_key_values(text: str) -> dict:
    """Parse `key = value` lines; blank lines and # comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key in {raw!r}")
        out[key] = value.strip()
    return out


def format_key_values(mapping: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in mapping.items())


def parse_float(mapping: dict, key: str, default: float) -> float:
    if key not in mapping:
        return default
    try:
        return float(mapping[key])
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a number, got {mapping[key]!r}") from exc


def parse_int(mapping: dict, key: str, default: int) -> int:
    if key not in mapping:
        return default
    try:
        return int(mapping[key])
    except ValueError as exc:
        raise ConfigError(f"{key}: expected an integer, got {mapping[key]!r}") from exc


def parse_bool(mapping: dict, key: str, default: bool) -> bool:
    if key not in mapping:
        return default
    value = mapping[key].lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {mapping[key]!r}")


def parse_float_list(mapping: dict, key: str, default: tuple) -> tuple:
    if key not in mapping:
        return tuple(default)
    try:
        return tuple(float(x) for x in mapping[key].split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated numbers") from exc
