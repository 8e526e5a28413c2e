"""Layered run configuration: built-in defaults, optional TOML file, then
dotted --set overrides from the command line."""
from __future__ import annotations

import json

try:
    import tomllib
except ModuleNotFoundError:        # Python < 3.11
    import tomli as tomllib


def default_config():
    return {
        "model": {
            "n_gaussians": 512,
            "m_inducing": 64,
            "latent_dim": 64,
            "n_blocks": 2,
            "heads": 4,
            "gica_points": 4,
            "class_count": 6,
            "horizon": 1,
            "attention": "induced",
            "temporal": True,
            "zero_flow": False,
            "s_min": 0.02,
            "s_max": 0.5,
            "encoder_channels": [16, 32],
            "fixed_heads": [],
        },
        "train": {
            "steps": 400,
            "lr": 2e-3,
            "batch_size": 2,
            "seed": 0,
            "w_depth": 1.0,
            "w_sem": 1.0,
            "w_alpha": 1.0,
            "w_anchor": 0.05,
            "grad_clip": 5.0,
            "loss_ceiling": 1e4,
            "log_every": 25,
        },
        "scene": {
            "seed": 0,
            "n_scenes": 1,
            "n_frames": 12,
            "dt": 0.5,
            "n_boxes": 4,
            "n_movers": 1,
            "n_poles": 2,
            "n_ellipsoids": 2,
            "n_walls": 1,
        },
        "grid": {
            "origin": [-8.0, -8.0, -0.4],
            "voxel_size": 0.4,
            "dims": [40, 40, 8],
            "tau_free": 0.3,
        },
    }


def load_config(path=None):
    cfg = default_config()
    if path is not None:
        with open(path, "rb") as f:
            loaded = tomllib.load(f)
        for section, values in loaded.items():
            if section not in cfg:
                raise ValueError(f"unknown config section '{section}'")
            for key, val in values.items():
                if key not in cfg[section]:
                    raise ValueError(f"unknown config key '{section}.{key}'")
                cfg[section][key] = val
    return cfg


def apply_overrides(cfg, sets):
    """sets: list of 'section.key=value' strings; values parse as JSON when
    possible and fall back to plain strings."""
    for item in sets or []:
        if "=" not in item:
            raise ValueError(f"override '{item}' is not of the form key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ValueError(f"override key '{dotted}' must be section.key")
        section, key = parts
        if section not in cfg or key not in cfg[section]:
            raise ValueError(f"unknown config key '{dotted}'")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        cfg[section][key] = val
    return cfg
