"""Experiment configuration: a YAML key-tree over built-in defaults.

Every leaf can be overridden with ``--set dotted.key=value`` (the value is
parsed as a YAML scalar or list). Unknown keys are rejected by name.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable

import yaml

DEFAULT_LORA_SCALES = [round(0.2 + 0.1 * i, 1) for i in range(12)]
SWEEP_CONDITIONS = ("LORA", "AUTOLORA", "LORA_CFG", "AUTOLORA_CFG")

DEFAULTS: dict[str, Any] = {
    "schedule": {"T": 200, "beta_start": 5e-4, "beta_end": 0.1},
    "model": {"hidden_widths": [128, 128], "time_embed_dim": 16, "cond_embed_dim": 16,
              "init_seed": 0},
    "data": {
        "seed": 0, "K": 4, "modes_per_label": 4, "n_per_mode": 500, "spread": 0.25,
        "radius": 4.0, "layout": "contiguous",
        # null selects the lowest-indexed mode of every label
        "lora_components": None,
        "n_examples": 32, "subset_seed": 0,
    },
    "train": {
        "base": {"steps": 8000, "batch_size": 512, "learning_rate": 1e-3, "p_uncond": 0.1,
                 "seed": 0},
        "lora": {"steps": 3000, "batch_size": 32, "learning_rate": 1e-3, "p_uncond": 0.1,
                 "seed": 0, "rank": 4, "alpha": 1.0, "scale": 1.0},
    },
    "guidance": {"mode": "AUTOLORA_CFG", "w": 5.0, "w1": 5.0, "w2": 5.0, "gamma": 1.5,
                 "lora_scale": 1.0},
    "sweep": {"lora_scales": DEFAULT_LORA_SCALES, "conditions": list(SWEEP_CONDITIONS),
              "cfg": [5.0], "gamma": [1.5]},
    "seeds": {"seed_base": 0, "n_samples_per_cell": 512},
    "eval": {"labels": None, "extractor": "identity",
             "bands": [[1.0, 5.0], [1.5, 4.0], [2.0, 3.0], [2.5, 2.0], [3.5, 1.0]],
             "anchor_sigma": 3.5},
    "vlm": {"retries": 3, "max_concurrency": 4},
    "output": {"dir": "out"},
}

# sections that determine trained weights; they alone name the run directory
MODEL_SECTIONS = ("schedule", "model", "data", "train")

# leaves whose default is null but which accept a list
_NULLABLE_LISTS = {"data.lora_components", "eval.labels"}


class ConfigError(ValueError):
    pass


def _walk(tree: dict, prefix: str = "") -> Iterable[tuple[str, Any]]:
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _walk(v, key + ".")
        else:
            yield key, v


def _lookup(tree: dict, key: str):
    node = tree
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key: {key}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"unknown config key: {key}")
    return node, parts[-1]


def _coerce(key: str, default: Any, value: Any) -> Any:
    if default is None:
        if value is None:
            return None
        if key in _NULLABLE_LISTS and isinstance(value, list):
            return [int(v) for v in value]
        raise ConfigError(f"config key {key} expects null or a list, got {value!r}")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms like 1e-3 as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {key} expects a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key {key} expects a list, got {value!r}")
        return value
    raise ConfigError(f"config key {key} has unsupported type")


def _set(tree: dict, key: str, value: Any) -> None:
    node, leaf = _lookup(tree, key)
    default = _lookup(DEFAULTS, key)[0][leaf]
    node[leaf] = _coerce(key, default, value)


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key}: {exc}") from None
    return key.strip(), value


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
        for key, value in _walk(loaded):
            _set(cfg, key, value)
    for text in overrides:
        _set(cfg, *parse_override(text))
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    sweep = cfg["sweep"]
    for name in ("lora_scales", "conditions", "cfg", "gamma"):
        if not sweep[name]:
            raise ConfigError(f"sweep.{name} must be nonempty")
    bad = [c for c in sweep["conditions"] if c not in SWEEP_CONDITIONS]
    if bad:
        raise ConfigError(f"sweep.conditions has unknown entries {bad}; "
                          f"expected {list(SWEEP_CONDITIONS)}")
    if cfg["seeds"]["n_samples_per_cell"] < 2:
        raise ConfigError("seeds.n_samples_per_cell must be >= 2")
    if cfg["eval"]["extractor"] not in ("identity", "standardized"):
        raise ConfigError("eval.extractor must be 'identity' or 'standardized'")
    if cfg["data"]["layout"] not in ("interleaved", "contiguous"):
        raise ConfigError("data.layout must be 'interleaved' or 'contiguous'")


def config_hash(tree: dict) -> str:
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def run_id(cfg: dict) -> str:
    return config_hash({k: cfg[k] for k in MODEL_SECTIONS})[:12]


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
