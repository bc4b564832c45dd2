"""Key-value config files.

Format: one ``key = value`` per line, ``#`` comments and blank lines
ignored. Keys are dotted lowercase (e.g. ``temperature.repair``). Values
stay strings; callers coerce with the typed getters.
"""

from __future__ import annotations


def parse_kv_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno} is not 'key = value': {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def load_config(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as handle:
        return parse_kv_text(handle.read())


def get_float(cfg: dict, key: str, default: float) -> float:
    return float(cfg[key]) if key in cfg and cfg[key] != "" else default


def get_int(cfg: dict, key: str, default: int) -> int:
    return int(cfg[key]) if key in cfg and cfg[key] != "" else default


def get_str(cfg: dict, key: str, default: str) -> str:
    return cfg.get(key, default) or default
