"""Experiment configuration files (JSON) and their provenance hash.

Every section that a command needs must be present and complete: unknown keys
and missing keys are both errors, reported with their dotted path.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from pathlib import Path

from .channel_sim import ScenarioConfig
from .errors import ConfigError

SCHEMA_VERSION = 1

ABLATIONS = ("none", "no_pretrain", "no_cross_modal", "no_prompts", "no_alignment")

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "seeds": [0],
    "scenario": dataclasses.asdict(ScenarioConfig()),
    "dataset": {"n_train": 900, "n_val": 100, "n_test": 100},
    "teacher": {
        "layers": 6, "hidden": 128, "heads": 8, "vocab": 512, "max_positions": 64,
        "lora_rank": 4, "lora_alpha": 8.0, "frozen_base": True,
        "pretrained": True, "pretrain_steps": 500,
        "corpus": {"zipf_s": 1.1, "bigram_prob": 0.6, "skip_prob": 0.0, "seq_len": 32, "batch": 16, "lr": 1e-3},
        "patch_size": 4, "cssa_dim": 8, "dict_size": 32, "anchors": 16, "prompts": 4,
        "ablation": "none",
    },
    "student": {"layers": 3, "hidden": 128, "heads": 8, "prompt_len": 4, "max_positions": 64},
    "train": {"epochs": 100, "batch_size": 64, "lr": 1e-4, "patience": 10, "lambda1": 0.1},
    "distill": {
        "epochs": 100, "batch_size": 64, "lr": 1e-4, "patience": 10, "lambda2": 1.0,
        "relation_heads": 8, "alpha": [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
    },
    "eval": {
        "snr_grid_db": [0, 5, 10, 15, 20, 25, 30], "snr_velocity_kmh": 30.0, "noise_seed": 0,
        "latency_runs": 100, "embed_samples": 64, "workers": 1,
    },
    "ablation": {"variants": ["none", "no_pretrain", "no_cross_modal", "no_prompts"]},
}

COMMAND_SECTIONS = {
    "generate": ("scenario", "dataset"),
    "train": ("scenario", "dataset", "teacher", "train"),
    "distill": ("scenario", "dataset", "teacher", "student", "distill"),
    "eval": ("scenario", "dataset", "eval"),
    "cost": ("scenario", "eval"),
    "dump-embeddings": ("scenario", "dataset", "eval"),
    "ablate": ("scenario", "dataset", "teacher", "train", "ablation"),
}

# keys whose values are free-form dictionaries rather than sub-schemas
_LEAF_DICTS = {"scenario"}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _type_ok(value, ref) -> bool:
    if isinstance(ref, bool):
        return isinstance(value, bool)
    if isinstance(ref, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(ref, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(ref, str):
        return isinstance(value, str)
    if isinstance(ref, list):
        return isinstance(value, list)
    return True


def _check_section(data: dict, ref: dict, path: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"config key '{path}' must be an object")
    unknown = sorted(set(data) - set(ref))
    if unknown:
        raise ConfigError(f"unknown config key '{path}.{unknown[0]}'")
    missing = [k for k in ref if k not in data]
    if missing:
        raise ConfigError(f"missing config key '{path}.{missing[0]}'")
    for key, value in data.items():
        sub = f"{path}.{key}"
        if isinstance(ref[key], dict) and key not in _LEAF_DICTS:
            _check_section(value, ref[key], sub)
        elif not _type_ok(value, ref[key]):
            raise ConfigError(f"config key '{sub}' has type {type(value).__name__}, "
                              f"expected {type(ref[key]).__name__}")


def validate(cfg: dict, command: str) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config key '{unknown[0]}'")
    if "schema_version" not in cfg:
        raise ConfigError("missing config key 'schema_version'")
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg['schema_version']!r} (expected {SCHEMA_VERSION})")
    for section in COMMAND_SECTIONS[command]:
        if section not in cfg:
            raise ConfigError(f"missing config key '{section}'")
    for section, value in cfg.items():
        if section == "schema_version":
            continue
        ref = DEFAULTS[section]
        if section == "scenario":
            ScenarioConfig.from_dict(value)  # names unknown keys itself
            _check_section(value, ref, section)
        elif isinstance(ref, dict):
            _check_section(value, ref, section)
        elif not _type_ok(value, ref):
            raise ConfigError(f"config key '{section}' has type {type(value).__name__}")
    if "seeds" in cfg and (not cfg["seeds"] or not all(isinstance(s, int) for s in cfg["seeds"])):
        raise ConfigError("config key 'seeds' must be a nonempty list of integers")
    if "teacher" in cfg and cfg["teacher"]["ablation"] not in ABLATIONS:
        raise ConfigError(f"config key 'teacher.ablation' must be one of {ABLATIONS}")
    if "ablation" in cfg:
        bad = [v for v in cfg["ablation"]["variants"] if v not in ABLATIONS]
        if bad or not cfg["ablation"]["variants"]:
            raise ConfigError(f"config key 'ablation.variants' has invalid entries {bad}")
    if "eval" in cfg and not cfg["eval"]["snr_grid_db"]:
        raise ConfigError("config key 'eval.snr_grid_db' must be nonempty")
    return cfg


def load_config(path, command: str) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return validate(cfg, command)


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict, **overrides) -> str:
    """Short SHA-256 of the canonical config plus any command-line overrides."""
    blob = canonical({"config": cfg, "overrides": overrides})
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
