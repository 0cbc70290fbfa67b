"""Experiment configuration: one YAML/JSON file drives every subcommand.

The schema is documented in docs/config.md. Variants select the model
family being trained (the fused multi-task model, the plain U-Net, the
oversampling / post-processing / low-epsilon-batch-Dice baselines, the
decoder-attached classifier, or the classifier-without-fusion ablation)
by rewriting config fields, so every comparison runs through one code
path.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import yaml

from .losses import DiceConfig
from .network import NetworkConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Raised for malformed or inconsistent experiment configs."""


_SCHEMA = {
    "seed": int,
    "out_dir": str,
    "phantom": {
        "grid_size": int,
        "counts": dict,
        "voxel_labeled_fraction": float,
        "resection_probability": (float, dict),
        "noise_std": float,
    },
    "data": {
        "manifest": str,
    },
    "network": {
        "in_channels": int,
        "num_classes": int,
        "base_channels": int,
        "num_levels": int,
        "norm": str,
        "classifier_location": str,
        "classifier_block": int,
        "fusion_enabled": bool,
        "fusion_hidden_reduction": int,
        "deep_supervision": bool,
        "num_removable_organs": int,
    },
    "train": {
        "alpha": float,
        "seg_batch_size": int,
        "clf_batch_size": int,
        "epochs": int,
        "lr_seg": float,
        "lr_clf": float,
        "weight_decay": float,
        "patch_size": list,
        "oversample_missing": bool,
        "fusion_train_input": str,
        "dice": dict,
        "dynamic_ce_weights": bool,
        "augment": bool,
        "norm": str,
    },
    "evaluate": {
        "modes": list,
        "patch_size": list,
        "overlap": float,
        "dump_predictions": bool,
    },
}

_DICE_KEYS = {"epsilon": float, "batch_reduction": bool,
              "include_background": bool}

VARIANTS = {
    "halos": {
        "network": {"classifier_location": "encoder", "fusion_enabled": True},
        "eval_modes": ["gt", "pred"],
    },
    "plain": {
        "network": {"classifier_location": "none", "fusion_enabled": False},
        "train": {"alpha": 1.0},
        "eval_modes": ["raw"],
    },
    "oversample": {
        "network": {"classifier_location": "none", "fusion_enabled": False},
        "train": {"alpha": 1.0, "oversample_missing": True},
        "eval_modes": ["raw"],
    },
    "post_proc": {
        "network": {"classifier_location": "none", "fusion_enabled": False},
        "train": {"alpha": 1.0},
        "eval_modes": ["raw", "post"],
    },
    "batch_red": {
        "network": {"classifier_location": "none", "fusion_enabled": False},
        "train": {"alpha": 1.0,
                  "dice": {"epsilon": 1e-7, "batch_reduction": True}},
        "eval_modes": ["raw"],
    },
    "decoder_classifier": {
        "network": {"classifier_location": "decoder", "fusion_enabled": False},
        "eval_modes": ["raw"],
    },
    "halos_no_fusion": {
        "network": {"classifier_location": "encoder", "fusion_enabled": False},
        "eval_modes": ["raw"],
    },
}


def _check_keys(section: str, doc: dict, allowed: dict):
    for key, value in doc.items():
        if key not in allowed:
            raise ConfigError(f"unknown key '{section}.{key}'" if section
                              else f"unknown key '{key}'")
        want = allowed[key]
        if isinstance(want, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{section + '.' if section else ''}{key}' "
                                  f"must be a mapping")
            _check_keys(f"{section}.{key}" if section else key, value, want)
        else:
            types = want if isinstance(want, tuple) else (want,)
            if types == (float,):
                types = (float, int)
            if not isinstance(value, types) or isinstance(value, bool) and bool not in types:
                raise ConfigError(
                    f"'{section + '.' if section else ''}{key}' has wrong type "
                    f"{type(value).__name__}")


def load_config(path, variant: str | None = None,
                overrides: dict | None = None) -> dict:
    """Load, validate, and resolve a config file.

    ``HALOS_SEED`` in the environment overrides the config seed. The
    returned dict always carries ``seed``, ``variant``, and the variant's
    evaluation modes under ``evaluate.modes`` (unless the file pins them).
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML/JSON: {e}") from e
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys("", doc, _SCHEMA)
    if "train" in doc and "dice" in doc["train"]:
        _check_keys("train.dice", doc["train"]["dice"], _DICE_KEYS)

    cfg = copy.deepcopy(doc)
    cfg.setdefault("seed", 0)

    if variant is not None:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{variant}' "
                              f"(choose from {sorted(VARIANTS)})")
        spec = VARIANTS[variant]
        for section in ("network", "train"):
            if section in spec:
                cfg.setdefault(section, {})
                cfg[section].update(copy.deepcopy(spec[section]))
        cfg.setdefault("evaluate", {})
        cfg["evaluate"].setdefault("modes", list(spec["eval_modes"]))
        cfg["variant"] = variant

    if overrides:
        for dotted, value in overrides.items():
            node = cfg
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = value

    env_seed = os.environ.get("HALOS_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as e:
            raise ConfigError(f"HALOS_SEED must be an integer, "
                              f"got '{env_seed}'") from e

    # fail fast: construct the typed configs now so bad values exit as
    # config errors, not mid-run failures
    try:
        network_config(cfg)
        train_config(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def network_config(cfg: dict) -> NetworkConfig:
    return NetworkConfig(**cfg.get("network", {}))


def train_config(cfg: dict) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    if "dice" in section:
        section["dice"] = DiceConfig(**section["dice"])
    if "patch_size" in section:
        section["patch_size"] = tuple(int(p) for p in section["patch_size"])
    section.setdefault("seed", int(cfg.get("seed", 0)))
    return TrainConfig(**section)


def semantic_config(cfg: dict) -> dict:
    """The config content that determines results (output paths excluded)."""
    return {k: v for k, v in sorted(cfg.items()) if k != "out_dir"}


def config_hash(cfg: dict) -> str:
    """Git-style blob hash of the canonical semantic config JSON."""
    blob = json.dumps(semantic_config(cfg), sort_keys=True,
                      separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\x00" % len(blob) + blob).hexdigest()
