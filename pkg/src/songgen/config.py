"""Run configuration: one document per run with per-stage subsections.

Two presets ship with the package: "paper" records the full-scale reference
hyperparameters, "desk" the laptop-scale overrides used for smoke training and
the test suite. A run config is a preset plus optional overrides, serialized
as YAML.
"""

from __future__ import annotations

import copy
from typing import Any, Mapping

import yaml

from .errors import ConfigError

STAGES = ("rvq", "vae", "midi", "vocal", "ldm")

PAPER_PRESET: dict[str, Any] = {
    "preset": "paper",
    "codec": {"n_codebooks": 8, "codebook_size": 1024, "d_feat": 32},
    "midi_lm": {
        "d_global": 768, "n_global_layers": 16, "n_global_heads": 12,
        "d_local": 768, "n_local_layers": 6, "n_local_heads": 8,
        "d_slot": 768, "text_encoder_layers": 2,
        "lr": 5e-4, "steps": 50_000, "adam_betas": [0.9, 0.98], "adam_eps": 1e-8,
    },
    "vocal_lm": {
        "d_global": 1152, "n_global_layers": 20, "n_global_heads": 16,
        "d_local": 1152, "n_local_layers": 6, "n_local_heads": 8,
        "d_slot": 1152, "text_encoder_layers": 2,
        "lr": 5e-4, "steps": 100_000, "adam_betas": [0.9, 0.98], "adam_eps": 1e-8,
    },
    "vae": {"d_latent": 20, "hidden": 256, "lr": 1e-4, "steps": 20_000},
    "ldm": {
        "d": 576, "layers": 4, "heads": 8,
        "t_max": 1000, "beta_start": 1e-4, "beta_end": 0.02,
        "guidance": 3.0, "lr": 3e-6, "steps": 80_000,
    },
    "dropout": {"p_joint": 0.1, "p_each": 0.1},
}

DESK_PRESET: dict[str, Any] = {
    "preset": "desk",
    "codec": {"n_codebooks": 8, "codebook_size": 64, "d_feat": 32},
    "midi_lm": {
        "d_global": 128, "n_global_layers": 2, "n_global_heads": 4,
        "d_local": 64, "n_local_layers": 1, "n_local_heads": 4,
        "d_slot": 64, "text_encoder_layers": 1,
        "lr": 2e-3, "steps": 2000, "adam_betas": [0.9, 0.98], "adam_eps": 1e-8,
    },
    "vocal_lm": {
        "d_global": 64, "n_global_layers": 2, "n_global_heads": 4,
        "d_local": 48, "n_local_layers": 1, "n_local_heads": 4,
        "d_slot": 32, "text_encoder_layers": 1,
        "lr": 3e-3, "steps": 300, "adam_betas": [0.9, 0.98], "adam_eps": 1e-8,
    },
    "vae": {"d_latent": 20, "hidden": 48, "lr": 3e-3, "steps": 200},
    "ldm": {
        "d": 64, "layers": 2, "heads": 4,
        "t_max": 100, "beta_start": 1e-3, "beta_end": 0.2,
        "guidance": 2.0, "lr": 3e-3, "steps": 200,
    },
    "dropout": {"p_joint": 0.1, "p_each": 0.1},
}

PRESETS = {"paper": PAPER_PRESET, "desk": DESK_PRESET}

_REQUIRED_SECTIONS = ("codec", "midi_lm", "vocal_lm", "vae", "ldm", "dropout")


def get_preset(name: str) -> dict[str, Any]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def merge_config(base: Mapping[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    """Recursive dict merge; override scalars replace, dicts merge."""
    out = copy.deepcopy(dict(base))
    for key, val in overrides.items():
        if isinstance(val, Mapping) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def validate_config(cfg: Mapping[str, Any]) -> dict[str, Any]:
    for section in _REQUIRED_SECTIONS:
        if section not in cfg or not isinstance(cfg[section], Mapping):
            raise ConfigError(f"missing config section {section!r}")
    codec = cfg["codec"]
    if codec["n_codebooks"] < 3:
        raise ConfigError("codec needs at least 3 codebooks for the acoustic slots")
    if codec["codebook_size"] < 2:
        raise ConfigError("codebook size must be at least 2")
    ldm = cfg["ldm"]
    if not (0 < ldm["beta_start"] < ldm["beta_end"] < 1):
        raise ConfigError("noise schedule requires 0 < beta_start < beta_end < 1")
    drop = cfg["dropout"]
    for key in ("p_joint", "p_each"):
        if not (0 <= drop[key] < 1):
            raise ConfigError(f"dropout {key} must lie in [0, 1)")
    return dict(cfg)


def load_config(path) -> dict[str, Any]:
    """Read a run config: a preset name plus overrides, merged and validated."""
    try:
        with open(path) as f:
            doc = yaml.safe_load(f) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    preset = get_preset(doc.get("preset", "desk"))
    return validate_config(merge_config(preset, doc))


def save_config(cfg: Mapping[str, Any], path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(dict(cfg), f, sort_keys=False)
