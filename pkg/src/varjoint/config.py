"""Run configuration: JSON file sections merged over defaults."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, fields
from pathlib import Path

from .likelihood import OutcomeScaling
from .sampler import PriorConfig, SamplerConfig

DEFAULTS = {
    "data": {"percentile_step": 2.0, "degree": 3, "use_regimes": True, "min_obs": 2},
    "prior": asdict(PriorConfig()),
    "sampler": asdict(SamplerConfig()),
    "scaling": asdict(OutcomeScaling()),
    "simulate": {"setting": 1, "scale": "desk", "truth": {}},
    "study": {"replicates": None, "n_iter": None, "n_burnin": None},
    "ppc": {"n_rep": 500},
    "seed": 0,
}


class ConfigError(ValueError):
    """Unknown key or malformed configuration file."""


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and k != "truth":
            if not isinstance(v, dict):
                raise ConfigError(f"{path + k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (flags)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, payload)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _build(cls, section: dict):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in section.items() if k in names})


def prior_config(cfg: dict) -> PriorConfig:
    return _build(PriorConfig, cfg["prior"])


def sampler_config(cfg: dict) -> SamplerConfig:
    return _build(SamplerConfig, cfg["sampler"])


def scaling_config(cfg: dict) -> OutcomeScaling:
    return _build(OutcomeScaling, cfg["scaling"])
