"""Experiment configuration: loading, defaults, canonical hashing.

Configs are YAML. Only filesystem paths may be overridden from the
environment (``KDAUG_DATA_ROOT``, ``KDAUG_OUTPUT_DIR``); every scientific
parameter lives in the file. Paths are left out of the config hash so moving
data or outputs does not invalidate runs.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import yaml

from .augment import AugmentationPolicy
from .distill import KDConfig, TrainingSchedule
from .models import ModelSpec


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "dataset": {
        "source": "synthetic",  # synthetic | pamap2 | csv
        "root": None,
        "csv_schema": None,
        "synthetic": {"n_classes": 4, "n_subjects": 8, "channels": 3, "T": 128, "windows_per_class": 10,
                      "seed": 0, "separation": 1.0, "noise_std": 0.3},
        "window_len": 128,
        "step": 128,
        "downsample": 1,
        "split": "holdout",  # holdout | loso
        "test_subjects": ["s006", "s007"],
        "pure_only": True,
        "class_set": None,
    },
    "models": {
        "teacher": {"family": "wrn", "depth": 16, "width": 3, "kernel_size": 3},
        "student": {"family": "wrn", "depth": 16, "width": 1, "kernel_size": 3},
    },
    "schedule": {"total_epochs": 30, "initial_lr": 0.05, "first_drop_epoch": 10, "first_drop_factor": 0.5,
                 "periodic_factor": 0.1, "momentum": 0.9, "weight_decay": 0.0, "batch_size": 32},
    "kd": {"tau": 4.0, "lam": 0.7, "mode": "eskd", "teacher_sees_clean": False},
    "augmentation": {
        "teacher": {"kind": "none"},
        "student": {"kind": "none"},
        "test": {"kind": "none"},
    },
    "seed": 0,
    "fold": 0,
    "ckpt_every": None,
    "output_dir": "kdaug-out",
}

PATH_KEYS = (("dataset", "root"), ("output_dir",))
ENV_OVERRIDES = {"KDAUG_DATA_ROOT": ("dataset", "root"), "KDAUG_OUTPUT_DIR": ("output_dir",)}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set(d: dict, path: tuple, value):
    for k in path[:-1]:
        d = d.setdefault(k, {})
    d[path[-1]] = value


def _get(d: dict, path: tuple):
    for k in path:
        if not isinstance(d, dict) or k not in d:
            return None
        d = d[k]
    return d


def resolve(raw: dict, env: dict | None = None) -> dict:
    """Merge ``raw`` over the defaults, apply path overrides and validate."""
    unknown = set(raw or {}) - set(DEFAULTS) - {"name", "sweep"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw or {})
    env = os.environ if env is None else env
    for var, path in ENV_OVERRIDES.items():
        if env.get(var):
            _set(cfg, path, env[var])
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    ds = cfg["dataset"]
    if ds["source"] not in ("synthetic", "pamap2", "csv"):
        raise ConfigError(f"dataset.source must be synthetic, pamap2 or csv, got {ds['source']!r}")
    if ds["split"] not in ("holdout", "loso"):
        raise ConfigError(f"dataset.split must be holdout or loso, got {ds['split']!r}")
    if ds["source"] in ("pamap2", "csv") and not ds.get("root"):
        raise ConfigError(f"dataset.root is required for source {ds['source']!r} (or set KDAUG_DATA_ROOT)")
    if ds["source"] == "csv" and not (ds.get("csv_schema") or {}).get("channels"):
        raise ConfigError("dataset.csv_schema.channels is required for csv sources")
    try:
        schedule(cfg)
        kd_config(cfg)
        for role in ("teacher", "student", "test"):
            policy(cfg, role)
        for role in ("teacher", "student"):
            model_spec(cfg, role, in_channels=1, n_classes=2)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load(path, env: dict | None = None) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    raw = yaml.safe_load(p.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return resolve(raw, env)


def scientific(cfg: dict) -> dict:
    """The config with path-only keys removed."""
    out = copy.deepcopy(cfg)
    for path in PATH_KEYS:
        parent = _get(out, path[:-1]) if len(path) > 1 else out
        if isinstance(parent, dict):
            parent.pop(path[-1], None)
    out.pop("name", None)
    return out


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical(obj).encode()).hexdigest()


# ---------------------------------------------------------------------------
# typed views


def schedule(cfg: dict) -> TrainingSchedule:
    return TrainingSchedule(**cfg["schedule"])


def kd_config(cfg: dict) -> KDConfig:
    kd = cfg["kd"]
    return KDConfig(tau=kd["tau"], lam=kd["lam"], mode=kd["mode"])


def policy(cfg: dict, role: str) -> AugmentationPolicy:
    return AugmentationPolicy.from_dict(cfg["augmentation"][role])


def model_spec(cfg: dict, role: str, in_channels: int, n_classes: int) -> ModelSpec:
    d = dict(cfg["models"][role])
    return ModelSpec(family=d["family"], width=d["width"], in_channels=in_channels, n_classes=n_classes,
                     depth=d.get("depth", 16 if d["family"] == "wrn" else 18), kernel_size=d.get("kernel_size", 3))


def dataset_hash(cfg: dict) -> str:
    return config_hash(scientific({"dataset": cfg["dataset"]})["dataset"])
