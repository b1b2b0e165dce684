"""Flat ``key = value`` configuration with sim./sensor./policy./raster. namespaces.

The file named by ``MPV_CONFIG`` (or passed explicitly) is read first; values
given on the command line win.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .raster import GridSpec
from .sensor import NoiseProfile, calibrate
from .world import SimConfig

ENV_VAR = "MPV_CONFIG"
NAMESPACES = ("sim", "sensor", "policy", "raster")

POLICY_DEFAULTS = {
    "epochs": 2,
    "lr": 1e-3,
    "batch": 64,
    "optimizer": "adam",
    "steps": 800,
    "rollouts": 10,
}
RASTER_KEYS = ("width_px", "height_px", "meters_per_px")


class ConfigError(ValueError):
    pass


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.split(".", 1)[0] not in NAMESPACES or "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} is not in one of {NAMESPACES}")
        out[key] = value
    return out


def read_config(path=None) -> dict[str, str]:
    """Read ``path``, else the file named by ``$MPV_CONFIG``, else nothing."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return {}
    p = Path(path)
    return parse_config(p.read_text(), str(p))


@dataclass
class Settings:
    sim: SimConfig = field(default_factory=SimConfig)
    profile: Optional[NoiseProfile] = None
    policy: dict = field(default_factory=lambda: dict(POLICY_DEFAULTS))
    raster: dict = field(default_factory=dict)

    def grid(self, **kw) -> GridSpec:
        return GridSpec(**{**self.raster, **kw})

    def noise(self) -> NoiseProfile:
        return self.profile if self.profile is not None else calibrate()


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def settings_from(cfg: dict[str, str]) -> Settings:
    """Build typed settings from a parsed config; unknown keys are an error."""
    sim_kw, sensor_kw, policy, raster = {}, {}, dict(POLICY_DEFAULTS), {}
    sim_fields = {f.name: f for f in fields(SimConfig)}
    base_grid = GridSpec()
    for key, value in cfg.items():
        ns, name = key.split(".", 1)
        if ns == "sim":
            if name not in sim_fields:
                raise ConfigError(f"unknown key {key}")
            sim_kw[name] = float(value)
        elif ns == "sensor":
            sensor_kw[key] = value
        elif ns == "policy":
            if name not in POLICY_DEFAULTS:
                raise ConfigError(f"unknown key {key}")
            policy[name] = _coerce(value, POLICY_DEFAULTS[name])
        elif ns == "raster":
            if name not in RASTER_KEYS:
                raise ConfigError(f"unknown key {key}")
            raster[name] = _coerce(value, getattr(base_grid, name))
    profile = None
    if sensor_kw:
        base = calibrate().to_config()
        unknown = sorted(set(sensor_kw) - set(base))
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]}")
        try:
            profile = NoiseProfile.from_config({**base, **sensor_kw})
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad sensor settings: {exc}") from exc
    return Settings(replace(SimConfig(), **sim_kw), profile, policy, raster)


def load_settings(path=None, overrides: Optional[dict[str, str]] = None) -> Settings:
    cfg = read_config(path)
    cfg.update(overrides or {})
    return settings_from(cfg)
