"""Experiment configuration: typed defaults, YAML files and environment overrides.

Every key has a default here; a config file only lists what it changes.
Environment variables ``ANALOGROBUST__SECTION__KEY=value`` override both
(values are parsed as YAML scalars, so ``5``, ``0.1`` and ``[1, 2]`` work).
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import yaml

from .errors import ConfigError

ENV_PREFIX = "ANALOGROBUST__"

PLATFORMS = ["FP32", "HWA_FP32", "DIGITAL", "AIMC_MODEL", "AIMC_CHIP_INSTANCE"]

DEFAULTS: dict = {
    "seed": 0,
    "out": "runs/default",
    "dataset": {
        "name": "mnist5k",  # mnist5k | cifar10 | idx
        "path": "",
        "test_size": 1000,  # held out from mnist5k; cifar10 uses its own test split
        "val_fraction": 0.2,
        "attack_samples": 200,
        "calibration_samples": 512,
        "balanced_per_class": 100,
    },
    "network": {"channels": [8, 16], "hidden": 64},
    "training": {"epochs": 15, "lr": 0.1, "momentum": 0.7, "batch_size": 128},
    "hwa": {"epochs": 10, "lr": 0.05, "noise_std": 0.08},
    "hardware": {
        "tile_rows": 256,
        "tile_cols": 256,
        "g_max": 160.0,
        "adc_unit": 0.115,
        "converter_bits": 8,
        "output_std": 0.04,
        "prog_std_poly": [0.0, 0.08, 0.0, 0.0],
        "read_std_scale": 0.03,
        "nu_mean": 0.06,
        "nu_std": 0.02,
        "t0": 25.0,
        "noise_model": "",  # optional JSON file overriding the tables above
    },
    "platforms": list(PLATFORMS),
    "caps": {"max_eps": 0.05, "max_pixels": 5},
    "attacks": {
        "PGD": {"iterations": [1, 2, 3, 4, 5], "magnitudes": [0.01, 0.02, 0.03, 0.04, 0.05]},
        "SQUARE": {"iterations": [10, 20, 40, 80, 160], "magnitudes": [0.01, 0.02, 0.03, 0.04, 0.05]},
        "ONEPIXEL": {"iterations": [1, 2, 3, 4, 5], "magnitudes": [1, 2, 3, 4, 5]},
    },
    "sweep": {"attacks": ["PGD", "ONEPIXEL"], "diagonal_only": True},
    "repetitions": {"envelope": 10, "accuracy": 100, "calibration": 20},
    "calibration": {"drops": [1.0, 2.5, 5.0, 10.0], "source": ["weight", "recurrent"], "tolerance": 0.25,
                    "max_probes": 40},
    "ablation": {"drops": [5.0, 10.0], "attack": "PGD"},
    "drift": {"times": [0.0, 86400.0, 604800.0], "attack": "PGD"},
    "combination": {"target_drop": 5.0, "band": [4.9, 5.1], "proportions": 6, "output_points": 12,
                    "repeats": 10, "attack": "PGD"},
    "hil": {"B": 2000, "reinfer_every": 50, "latency": 0.01, "attack": "PGD"},
}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (update or {}).items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError("unknown configuration key", key=where)
        grids = key == "attacks" and not path
        if isinstance(base[key], dict) and not grids:
            if not isinstance(value, dict):
                raise ConfigError("expected a mapping", key=where)
            out[key] = _merge(base[key], value, where)
        elif grids:
            if not isinstance(value, dict):
                raise ConfigError("expected a mapping", key=where)
            for name, grid in value.items():
                if name not in base["attacks"]:
                    raise ConfigError("unknown attack", key=f"{where}.{name}")
                out["attacks"][name] = _merge(base["attacks"][name], grid, f"{where}.{name}")
        else:
            out[key] = _coerce(base[key], value, where)
    return out


def _coerce(default, value, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key=where)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key=where)
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key=where)
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key=where)
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", key=where)
        return value
    return value


def validate(cfg: dict) -> dict:
    for p in cfg["platforms"]:
        if p not in PLATFORMS:
            raise ConfigError(f"unknown platform {p!r}", key="platforms")
    for name, grid in cfg["attacks"].items():
        its, mags = grid["iterations"], grid["magnitudes"]
        for axis, vals in (("iterations", its), ("magnitudes", mags)):
            if not vals or any(b <= a for a, b in zip(vals, vals[1:])):
                raise ConfigError("axis must be non-empty and strictly increasing", key=f"attacks.{name}.{axis}")
        if cfg["sweep"]["diagonal_only"] and len(its) != len(mags):
            raise ConfigError("envelope sweeps need square grids", key=f"attacks.{name}")
        cap = cfg["caps"]["max_pixels"] if name == "ONEPIXEL" else cfg["caps"]["max_eps"]
        if max(mags) > cap + 1e-12:
            raise ConfigError(f"magnitude {max(mags)} exceeds cap {cap}", key=f"attacks.{name}.magnitudes")
    if cfg["dataset"]["name"] not in ("mnist5k", "cifar10", "idx"):
        raise ConfigError("unknown dataset", key="dataset.name")
    lo, hi = cfg["combination"]["band"]
    if not lo < cfg["combination"]["target_drop"] < hi:
        raise ConfigError("target drop must lie inside the band", key="combination.band")
    return cfg


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    tree: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX):].split("__")]
        if keys and keys[0] == "attacks" and len(keys) > 1:
            keys[1] = keys[1].upper()
        node = tree
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        try:
            node[keys[-1]] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {raw!r}: {exc}", key=".".join(keys)) from exc
    return tree


def load_config(path=None, overrides: dict | None = None, environ=None) -> dict:
    data = {}
    if path:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found", key="--config") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}", key=str(path)) from exc
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping", key=str(path))
    cfg = _merge(DEFAULTS, data)
    cfg = _merge(cfg, env_overrides(environ))
    cfg = _merge(cfg, overrides or {})
    return validate(cfg)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
