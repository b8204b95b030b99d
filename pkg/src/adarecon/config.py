"""Run configuration: JSON file plus command-line overrides.

A config file is a JSON object with the sections below; anything omitted
takes the default shown by :func:`default_config`. The resolved config
(every default included) is echoed by each command and hashed into the
metric reports.

::

    {
      "data":     {"root": "...", "dataset": "toy", "categories": ["toy_stripes"]},
      "model":    {"resolution": 64, "base_channels": 32, "channel_mults": [1, 2, 2]},
      "schedule": {"kind": "linear", "t_max": 1000, "beta_start": 1e-4, "beta_end": 0.02},
      "train":    {"iterations": 4000, "batch_size": 32, "lr": null, "p_anom": 0.5, ...},
      "search":   {"t_start": 750, "t_min": 350, "delta": null, "deltas": {}, ...},
      "scoring":  {"feature_layers": [3, 6, 9, 12], "sigma": 6.0, "top_k": null, ...},
      "toy":      {"textures": ["stripes"], "size": 64, ...},
      "seed": 0,
      "out": null
    }

``search.delta`` set to a number forces that threshold for every category;
left ``null``, each category looks up ``search.deltas`` first, then the
per-class table of its dataset preset, then ``DEFAULT_DELTA``.
"""

from __future__ import annotations

import copy
import json
import os
import re
from pathlib import Path

from .metrics import config_hash
from .synthesis import SynthParams

__all__ = [
    "ConfigError",
    "DEFAULT_DELTA",
    "DELTA_TABLES",
    "DATASET_PRESETS",
    "OUT_ENV",
    "default_config",
    "load_config",
    "merge",
    "resolve_delta",
    "detector_params",
    "output_root",
    "experiment_config",
    "config_hash",
]

OUT_ENV = "ADARECON_OUT"
DEFAULT_DELTA = 0.35

# per-class thresholds selected on each benchmark
DELTA_TABLES = {
    "mvtec": {
        "carpet": 0.32, "grid": 0.47, "leather": 0.35, "tile": 0.35, "wood": 0.37,
        "bottle": 0.32, "cable": 0.40, "capsule": 0.40, "hazelnut": 0.50, "metal_nut": 0.40,
        "pill": 0.35, "screw": 0.32, "toothbrush": 0.50, "transistor": 0.50, "zipper": 0.35,
    },
    "mpdd": {
        "bracket_black": 0.35, "bracket_brown": 0.35, "bracket_white": 0.35,
        "connector": 0.35, "metal_plate": 0.25, "tubes": 0.10,
    },
    "visa": {
        "candle": 0.45, "capsules": 0.40, "cashew": 0.40, "chewinggum": 0.45, "fryum": 0.35,
        "macaroni1": 0.45, "macaroni2": 0.45, "pcb1": 0.30, "pcb2": 0.30, "pcb3": 0.30,
        "pcb4": 0.30, "pipe_fryum": 0.45,
    },
    "pcb_bank": {
        "pcb1": 0.30, "pcb2": 0.30, "pcb3": 0.30, "pcb4": 0.30, "pcb5": 0.40,
        "pcb6": 0.45, "pcb7": 0.30,
    },
}

# start step, minimum step and (for the shared-model variants) one global threshold
DATASET_PRESETS = {
    "mvtec": {"t_start": 750, "t_min": 350},
    "mpdd": {"t_start": 500, "t_min": 350},
    "visa": {"t_start": 450, "t_min": 200},
    "pcb_bank": {"t_start": 450, "t_min": 200},
    "mvtec_multi": {"t_start": 650, "t_min": 350, "delta": 0.45},
    "mpdd_multi": {"t_start": 500, "t_min": 350, "delta": 0.35},
    "visa_multi": {"t_start": 500, "t_min": 250, "delta": 0.15},
    "pcb_bank_multi": {"t_start": 500, "t_min": 250, "delta": 0.20},
    "toy": {"t_start": 300, "t_min": 100},
}


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "data": {"root": None, "dataset": "toy", "categories": None},
    "model": {"resolution": 64, "base_channels": 32, "channel_mults": [1, 2, 2]},
    "schedule": {"kind": "linear", "t_max": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "train": {"iterations": 4000, "batch_size": 32, "lr": None, "p_anom": 0.5, "target": "restore",
              "ema_decay": None,
              "synth": {"mask_kind": "fractal_noise", "coverage_range": [0.02, 0.15],
                        "opacity_range": [0.5, 1.0], "texture_source": "procedural"}},
    "search": {"t_start": None, "t_min": None, "delta": None, "deltas": {}, "n_extra": 0,
               "stride": 10, "diff_layer": 12, "diff_top_k": 10, "mask_sharpness": 4.0,
               "saff": True, "fixed_step": None},
    "scoring": {"feature_channels": [16, 32, 48, 64], "feature_layers": [3, 6, 9, 12],
                "sigma": 6.0, "top_k": None, "finetune": False, "finetune_iterations": 200},
    "toy": {"textures": ["stripes"], "size": 64, "n_train": 64, "n_test_normal": 25,
            "defect_count": 25, "defect_scale": [0.12, 0.25]},
    "seed": 0,
    "out": None,
}


def default_config() -> dict:
    return copy.deepcopy(_DEFAULTS)


def normalize_category(name: str) -> str:
    return re.sub(r"[\s\-]+", "_", name.strip().lower())


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Recursive merge; unknown keys are rejected so typos surface early."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "deltas":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _finalize(cfg: dict) -> dict:
    preset = cfg["data"]["dataset"]
    if preset is not None and preset not in DATASET_PRESETS:
        raise ConfigError(f"unknown dataset preset {preset!r}; known: {sorted(DATASET_PRESETS)}")
    defaults = DATASET_PRESETS.get(preset, DATASET_PRESETS["mvtec"])
    search = cfg["search"]
    for key in ("t_start", "t_min"):
        if search[key] is None:
            search[key] = defaults[key]
    if search["delta"] is None and "delta" in defaults:
        search["delta"] = defaults["delta"]
    if search["t_start"] > cfg["schedule"]["t_max"]:
        raise ConfigError(f"search.t_start={search['t_start']} exceeds schedule.t_max={cfg['schedule']['t_max']}")
    search["deltas"] = {normalize_category(k): float(v) for k, v in search["deltas"].items()}
    for key in ("channel_mults",):
        cfg["model"][key] = list(cfg["model"][key])
    SynthParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["train"]["synth"].items()})
    return cfg


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (flags win)."""
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        cfg = merge(cfg, user)
    if overrides:
        cfg = merge(cfg, overrides)
    return _finalize(cfg)


def resolve_delta(cfg: dict, category: str) -> tuple[float, str]:
    """Threshold for ``category`` and where it came from."""
    search = cfg["search"]
    if search["delta"] is not None:
        return float(search["delta"]), "global"
    key = normalize_category(category)
    if key in search["deltas"]:
        return search["deltas"][key], "config table"
    preset = (cfg["data"]["dataset"] or "").removesuffix("_multi")
    table = DELTA_TABLES.get(preset, {})
    if key in table:
        return table[key], f"{preset} table"
    return DEFAULT_DELTA, "default"


def detector_params(cfg: dict, category: str) -> dict:
    """Keyword arguments for :class:`AdaptiveDiffusionDetector` for one category."""
    m, s, tr, se, sc = (cfg[k] for k in ("model", "schedule", "train", "search", "scoring"))
    synth = SynthParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in tr["synth"].items()})
    return dict(
        resolution=m["resolution"], base_channels=m["base_channels"],
        channel_mults=tuple(m["channel_mults"]),
        schedule_kind=s["kind"], t_max=s["t_max"], beta_start=s["beta_start"], beta_end=s["beta_end"],
        iterations=tr["iterations"], batch_size=tr["batch_size"], lr=tr["lr"], p_anom=tr["p_anom"],
        target=tr["target"], ema_decay=tr["ema_decay"], synth_params=synth,
        t_start=se["t_start"], t_min=se["t_min"], delta=resolve_delta(cfg, category)[0],
        n_extra=se["n_extra"], stride=se["stride"], fixed_step=se["fixed_step"], saff=se["saff"],
        diff_layer=se["diff_layer"], diff_top_k=se["diff_top_k"], mask_sharpness=se["mask_sharpness"],
        feature_channels=tuple(sc["feature_channels"]), feature_layers=tuple(sc["feature_layers"]),
        sigma=sc["sigma"], top_k=sc["top_k"], finetune=sc["finetune"],
        finetune_iterations=sc["finetune_iterations"], random_state=cfg["seed"],
    )


def output_root(cfg: dict) -> Path:
    """``out`` from the config, else ``$ADARECON_OUT``, else ``./adarecon_runs``."""
    return Path(cfg["out"] or os.environ.get(OUT_ENV) or "adarecon_runs")


def experiment_config(cfg: dict) -> dict:
    """The config without file locations, for hashing: moving a run does not change it."""
    out = copy.deepcopy(cfg)
    out.pop("out", None)
    out.get("data", {}).pop("root", None)
    return out
