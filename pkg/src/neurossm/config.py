"""Flat ``key = value`` config files (one pair per line, ``#`` comments)."""
from __future__ import annotations

from pathlib import Path

from .errors import DataError


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_kv(path, items: dict) -> None:
    lines = [f"{k} = {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_floats(raw: str) -> list[float]:
    return [float(p) for p in raw.split(",") if p.strip()]


def parse_ints(raw: str) -> list[int]:
    return [int(p) for p in raw.split(",") if p.strip()]
