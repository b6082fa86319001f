"""Run configuration: a single JSON file per run, hashed into outputs.

Sections are command-specific (covariance, priors, sampler, simulate, fit,
predict, design, evaluate, diagnose) plus a global seed. Field errors are
reported with their dotted path.
"""

from __future__ import annotations

import json
from pathlib import Path

from .covariance import CovarianceError, CovarianceSpec
from .mcmc import SamplerConfig
from .model import PriorSpec

_MISSING = object()


class ConfigError(ValueError):
    """Invalid or missing configuration, tagged with the field path."""


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(p) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def get(cfg: dict, path: str, default=_MISSING):
    node = cfg
    parts = path.split(".")
    for i, key in enumerate(parts):
        if not isinstance(node, dict) or key not in node:
            if default is _MISSING:
                raise ConfigError(f"missing config field: {'.'.join(parts[: i + 1])}")
            return default
        node = node[key]
    return node


def get_typed(cfg: dict, path: str, typ, default=_MISSING):
    val = get(cfg, path, default)
    if val is default and default is not _MISSING:
        return val
    if typ is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, typ):
        raise ConfigError(f"{path}: expected {typ.__name__}, got {type(val).__name__}")
    return val


def covariance_from(cfg: dict, path: str = "covariance", default_sigma2: float = 1.0) -> CovarianceSpec:
    section = get(cfg, path, {})
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object")
    kwargs = dict(section)
    kwargs.setdefault("sigma2", default_sigma2)
    try:
        return CovarianceSpec(**kwargs)
    except (TypeError, CovarianceError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def priors_from(cfg: dict, path: str = "priors") -> PriorSpec:
    section = get(cfg, path, {})
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object")
    try:
        return PriorSpec.from_dict(section) if section else PriorSpec()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def sampler_from(cfg: dict, seed: int, path: str = "sampler") -> SamplerConfig:
    section = dict(get(cfg, path, {}))
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object")
    section.setdefault("iterations", 2000)
    section.setdefault("burnin", min(500, section["iterations"] // 4))
    section["seed"] = seed
    try:
        return SamplerConfig(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
