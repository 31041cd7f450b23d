"""Experiment configuration: one YAML file, merged over defaults and validated."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .geometry import CameraIntrinsics, GridSpec
from .ndf import TrainConfig
from .optics import OpticsModel


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "optics": OpticsModel().to_dict(),
    "camera": {"width": 192, "height": 144, "hfov_deg": 90.0},
    "grid": {
        "cube_edge": 12.0,
        "n_train": 8,
        # measured capture positions scatter around the commanded lattice
        "translation_jitter": 1.0,
        "rotation_jitter": 0.0,
    },
    "data": {
        "mode": "graycode",  # or "direct": exact oracle maps, no pattern decoding
        "noise": 0.0,
        "threshold": 5.0 / 255.0,
        "min_contrast": 0.25,
    },
    "gt_fit": {"n_centers": 200, "sigma": 25.0, "ridge": 1e-11},
    "gauss5d": {"n_centers": 600, "sigma": 0.2, "ridge": 1e-8, "position_scale": 0.02,
                "max_samples": 30000},
    "reconstruct": {"stride": 8.0, "radius": 3.0, "max_gap": 24.0},
    "ndf": TrainConfig().to_dict(),
    "eval": {"display_hfov_deg": 90.0, "pgm_scale": 20.0},
    "ablation": {
        "n_freqs": [16, 6],
        "activations": [["relu", "softplus"], ["sigmoid", "softplus"]],
        "iterations": [20000],
    },
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def resolve(overrides=None) -> dict:
    """Defaults merged with ``overrides``; every section is validated."""
    cfg = _merge(DEFAULTS, overrides or {})
    try:
        optics(cfg)
        camera(cfg)
        grid_spec(cfg)
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["grid"]["n_train"] not in (8, 27, 125):
        raise ConfigError("grid.n_train must be 8, 27 or 125")
    if cfg["data"]["mode"] not in ("graycode", "direct"):
        raise ConfigError("data.mode must be 'graycode' or 'direct'")
    abl = cfg["ablation"]
    if not (abl["n_freqs"] and abl["activations"] and abl["iterations"]):
        raise ConfigError("ablation lists must be non-empty")
    return cfg


def load(path=None, **cli_overrides) -> dict:
    """Read ``path`` (YAML) and apply command-line overrides (``None`` values skipped)."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if cli_overrides.get("seed") is not None:
        raw["seed"] = int(cli_overrides["seed"])
    if cli_overrides.get("out") is not None:
        raw["out"] = str(cli_overrides["out"])
    if cli_overrides.get("n_train") is not None:
        raw.setdefault("grid", {})["n_train"] = int(cli_overrides["n_train"])
    return resolve(raw)


def dump(cfg) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# --- typed views -----------------------------------------------------------------

def optics(cfg) -> OpticsModel:
    return OpticsModel.from_dict(cfg["optics"])


def camera(cfg) -> CameraIntrinsics:
    c = cfg["camera"]
    return CameraIntrinsics.from_fov(int(c["width"]), int(c["height"]), float(c["hfov_deg"]))


def grid_spec(cfg, seed_offset=0) -> GridSpec:
    g = cfg["grid"]
    n = {8: 2, 27: 3, 125: 5}.get(int(g["n_train"]))
    if n is None:
        raise ConfigError("grid.n_train must be 8, 27 or 125")
    return GridSpec(cube_edge=float(g["cube_edge"]), counts=(n, n, n),
                    rotation_jitter=float(g["rotation_jitter"]),
                    translation_jitter=float(g["translation_jitter"]),
                    seed=int(cfg["seed"]) + seed_offset)


def nominal_grid(cfg) -> GridSpec:
    spec = grid_spec(cfg)
    return GridSpec(spec.cube_edge, spec.counts, spec.center)


def train_config(cfg, **changes) -> TrainConfig:
    d = dict(cfg["ndf"])
    d.update(changes)
    d["seed"] = int(cfg["seed"]) if "seed" not in changes else changes["seed"]
    return TrainConfig(**d)
