"""
Configuration loading for LumaForge.

- DEFAULT_SEVERITY_CONFIG mirrors the shipped severity table
  (config_severity.json at the repository root holds the same document).
- User files are merged over the defaults key by key, then validated
  against schemas/severity_config.schema.json.
- Worker count falls back to the LUMAFORGE_WORKERS environment variable
  (a .env file is honored when python-dotenv finds one).
"""
from __future__ import annotations

import json
import logging
import os
from copy import deepcopy
from pathlib import Path
from typing import Any, Dict, Optional

from jsonschema import Draft202012Validator

from .errors import ConfigError

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass  # dotenv not installed, plain environment variables only

logger = logging.getLogger(__name__)

SCHEMA_DIR = Path(__file__).parent / "schemas"
WORKERS_ENV = "LUMAFORGE_WORKERS"

# Tier keys are strings so the document round-trips through JSON unchanged.
DEFAULT_SEVERITY_CONFIG: Dict[str, Any] = {
    "schema_version": 1,
    "max_ops": {"1": 1, "2": 2, "3": 3},
    "severe_only": ["color_cast", "flare"],
    "haze_color": [0.82, 0.84, 0.86],
    "operations": {
        "exposure": {
            "ev": {"1": [-0.3, 0.3], "2": [-0.8, 0.8], "3": [-1.5, 1.5]},
        },
        "brightness": {
            "percent": {"1": [-15.0, 15.0], "2": [-30.0, 30.0], "3": [-45.0, 45.0]},
        },
        "contrast": {
            "factor": {"1": [0.9, 1.1], "2": [0.75, 1.25], "3": [0.6, 1.4]},
        },
        "gamma": {
            "gamma": {"1": [0.85, 1.15], "2": [0.7, 1.3], "3": [0.55, 1.5]},
        },
        "warm": {
            "tint": {"1": [0.03, 0.07], "2": [0.08, 0.14], "3": [0.15, 0.25]},
        },
        "cool": {
            "tint": {"1": [0.03, 0.07], "2": [0.08, 0.14], "3": [0.15, 0.25]},
        },
        "vignette": {
            "strength": {"1": [0.1, 0.2], "2": [0.2, 0.4], "3": [0.4, 0.65]},
            "center_offset": {"1": [-0.1, 0.1], "2": [-0.1, 0.1], "3": [-0.1, 0.1]},
            "power": {"1": [2.5, 2.5], "2": [2.5, 2.5], "3": [2.5, 2.5]},
        },
        "shadow": {
            "strength": {"1": [0.2, 0.35], "2": [0.35, 0.55], "3": [0.55, 0.75]},
            "sharpness": {"1": [2.0, 4.0], "2": [4.0, 8.0], "3": [8.0, 16.0]},
            "angle_deg": {"1": [0.0, 360.0], "2": [0.0, 360.0], "3": [0.0, 360.0]},
        },
        "grain": {
            "intensity": {"1": [0.01, 0.02], "2": [0.02, 0.04], "3": [0.04, 0.07]},
        },
        "haze": {
            "alpha": {"1": [0.05, 0.15], "2": [0.15, 0.3], "3": [0.3, 0.5]},
        },
        "color_cast": {
            "strength": {"3": [0.15, 0.25]},
            "hue_deg": {"3": [0.0, 360.0]},
        },
        "flare": {
            "sigma": {"3": [0.08, 0.2]},
            "amplitude": {"3": [0.5, 1.0]},
            "edge_margin": {"3": [0.0, 0.15]},
        },
    },
}


def load_schema(name: str) -> Dict[str, Any]:
    with open(SCHEMA_DIR / name, "r", encoding="utf-8") as f:
        return json.load(f)


def ensure_valid(data: Dict[str, Any], schema: Dict[str, Any], what: str = "document") -> None:
    """Validate `data` against `schema`, raising ConfigError on the first failure."""
    errors = sorted(Draft202012Validator(schema).iter_errors(data), key=lambda e: [str(p) for p in e.path])
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.path) or "<root>"
        raise ConfigError(f"{what} invalid at {where}: {err.message}")


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = deepcopy(value)
    return out


def load_severity_config(config_file: Optional[str | os.PathLike] = None) -> Dict[str, Any]:
    """Load the severity table, merging an optional user file over the defaults."""
    cfg = deepcopy(DEFAULT_SEVERITY_CONFIG)
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"severity config not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                user_cfg = json.load(f) or {}
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
        logger.info("Loading severity config from %s", path)
        cfg = _deep_merge(cfg, user_cfg)

    ensure_valid(cfg, load_schema("severity_config.schema.json"), "severity config")

    # coerce numbers the way the discovery config did
    for op, params in cfg["operations"].items():
        for name, tiers in params.items():
            for tier, bounds in tiers.items():
                lo, hi = float(bounds[0]), float(bounds[1])
                if lo > hi:
                    raise ConfigError(f"severity config: operations/{op}/{name}/{tier} has lower bound > upper bound")
                tiers[tier] = [lo, hi]
    cfg["max_ops"] = {str(k): int(v) for k, v in cfg["max_ops"].items()}
    cfg["haze_color"] = [float(c) for c in cfg["haze_color"]]
    return cfg


def resolve_workers(cli_value: Optional[int] = None) -> int:
    """CLI value first, then LUMAFORGE_WORKERS, then 1."""
    if cli_value is not None:
        workers = cli_value
    else:
        raw = os.environ.get(WORKERS_ENV, "").strip()
        try:
            workers = int(raw) if raw else 1
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV}={raw!r} is not an integer")
    if workers < 1:
        raise ConfigError(f"worker count must be >= 1 (got {workers})")
    return workers
