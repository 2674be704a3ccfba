"""Flat key=value configuration files.

Lines are ``key=value``; blank lines and ``#`` comments are ignored.
Values stay strings until a consumer casts them, and every key can be
overridden on the command line (command line wins, then the file, then
the built-in default).
"""

from __future__ import annotations

from pathlib import Path

from .geomodel import HoodvalError

LAYER_KEYS = ("blocks", "listings", "amenities", "landuse", "security", "roads")


def load_config(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise HoodvalError(f"config file not found: {p}")
    out: dict[str, str] = {}
    for n, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise HoodvalError(f"{p}:{n}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise HoodvalError(f"{p}:{n}: empty key")
        out[key] = value.strip()
    return out


class Settings:
    """Config dict plus command-line overrides, with typed access."""

    def __init__(self, file_values: dict[str, str], overrides: dict[str, object],
                 base_dir: Path):
        self.file_values = file_values
        self.overrides = {k: v for k, v in overrides.items() if v is not None}
        self.base_dir = base_dir

    def get(self, key: str, default=None, cast=str):
        if key in self.overrides:
            raw = self.overrides[key]
        elif key in self.file_values:
            raw = self.file_values[key]
        else:
            return default
        try:
            if cast is bool and isinstance(raw, str):
                if raw.lower() in ("true", "1", "yes"):
                    return True
                if raw.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(raw)
            return cast(raw)
        except (TypeError, ValueError) as exc:
            raise HoodvalError(f"config key {key!r}: bad value {raw!r}") from exc

    def path(self, key: str):
        """Paths in the file resolve relative to the config file's folder."""
        raw = self.get(key)
        if raw is None:
            raise HoodvalError(f"config key {key!r} is required but missing")
        p = Path(raw)
        if not p.is_absolute() and key in self.file_values and key not in self.overrides:
            p = self.base_dir / p
        return p

    def layer_paths(self) -> dict[str, Path]:
        return {k: self.path(k) for k in LAYER_KEYS}
