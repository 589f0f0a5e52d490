"""Experiment configuration: TOML files with dotted keys, strict schema.

Precedence, lowest first: built-in defaults, the config file, ``DST_SEED``,
then ``--set key=value`` overrides and dedicated CLI flags.
"""

from __future__ import annotations

import copy
import json
import os
import sys
from pathlib import Path
from typing import Any, Iterable, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .trainer import VARIANTS


class ConfigError(ValueError):
    """Invalid configuration; message names the offending key path."""


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {
        "kind": "blobs",  # blobs | idx
        "classes": 3,
        "dims": 2,
        "n_per_class": 200,
        "spread": 0.08,
        "test_fraction": 0.25,
        "images": "",
        "labels": "",
    },
    "target": {
        "arch": "mlp",  # mlp | lenet
        "hidden": [64, 64],
        "epochs": 40,
        "lr": 0.01,
        "batch_size": 64,
        "endpoint": "",  # host:port of an external target; empty = in-process
        "input_shape": [],  # required with endpoint when no dataset is present
        "num_classes": 0,
    },
    "generator": {"noise_dim": 8, "hidden": 64, "base_channels": 32},
    "substitute": {"widths": [16, 16, 32, 32], "gate_k": 1.0},
    "gsil": {"alpha1": 1.0, "alpha2": 1.0, "normalize_nodes": False},
    "trainer": {
        "variant": "dst",
        "scenario": "probability",
        "epochs": 150,
        "steps_per_epoch": 100,
        "batch_size": 500,
        "lr_sub": 0.001,
        "lr_gen": 0.0001,
        "decay_start_epoch": 80,
        "reuse_query": False,
        "probe_generated": 1024,
        "probe_uniform": 1024,
    },
    "attack": {
        "method": "pgd",
        "epsilon": 0.3,
        "step_size": 0.01,
        "steps": 40,
        "label_source": "substitute",
        "cw_confidence": 0.0,
        "cw_search_steps": 9,
        "cw_lr": 0.01,
        "cw_iterations": 200,
        "cw_initial_const": 0.01,
    },
    "eval": {
        "mode": "non_target",
        "target_class": "round-robin",
        "repeats": 10,
        "limit": 0,  # max evaluation examples, 0 = whole test split
        "random_baseline": True,
        "embeddings": 512,
    },
}

CHOICES = {
    "dataset.kind": ("blobs", "idx"),
    "target.arch": ("mlp", "lenet"),
    "trainer.variant": tuple(VARIANTS),
    "trainer.scenario": ("probability", "label"),
    "attack.method": ("fgsm", "bim", "pgd", "cw"),
    "attack.label_source": ("substitute", "target"),
    "eval.mode": ("non_target", "target"),
}

# keys whose value may be either an int or a string
MIXED = {"eval.target_class"}

# sections that identify an experiment (attack/eval settings do not)
FINGERPRINT_KEYS = ("seed", "dataset", "target", "generator", "substitute", "gsil", "trainer")


def _check_value(path: str, default: Any, value: Any) -> Any:
    if path in MIXED:
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(f"{path}: expected an int or string, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{path}: expected an array of numbers, got {value!r}")
    if path in CHOICES and value not in CHOICES[path]:
        raise ConfigError(f"{path}: {value!r} is not one of {list(CHOICES[path])}")
    return value


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a table")
            _merge(base[key], value, path + ".")
        else:
            base[key] = _check_value(path, DEFAULTS_FLAT[path], value)


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


DEFAULTS_FLAT = _flatten(DEFAULTS)


def set_key(cfg: dict, path: str, value: Any) -> None:
    if path not in DEFAULTS_FLAT:
        raise ConfigError(f"unknown config key '{path}'")
    node = cfg
    parts = path.split(".")
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = _check_value(path, DEFAULTS_FLAT[path], value)


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b=value`` where value is TOML (bare words fall back to strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (), env: Optional[dict] = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        _merge(cfg, data)
    env = os.environ if env is None else env
    if env.get("DST_SEED"):
        try:
            cfg["seed"] = int(env["DST_SEED"])
        except ValueError:
            raise ConfigError(f"DST_SEED must be an integer, got {env['DST_SEED']!r}") from None
    for item in overrides:
        set_key(cfg, *parse_override(item))
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    t = cfg["trainer"]
    if not 0 <= t["decay_start_epoch"] < t["epochs"]:
        raise ConfigError(f"trainer.decay_start_epoch: must be in [0, trainer.epochs={t['epochs']})")
    for key in ("lr_sub", "lr_gen"):
        if t[key] <= 0:
            raise ConfigError(f"trainer.{key}: must be positive")
    for key in ("epochs", "steps_per_epoch", "batch_size"):
        if t[key] < 1:
            raise ConfigError(f"trainer.{key}: must be >= 1")
    if cfg["gsil"]["alpha1"] < 0 or cfg["gsil"]["alpha2"] < 0 or cfg["gsil"]["alpha1"] + cfg["gsil"]["alpha2"] == 0:
        raise ConfigError("gsil.alpha1/alpha2: must be nonnegative and not both zero")
    if cfg["attack"]["epsilon"] < 0:
        raise ConfigError("attack.epsilon: must be nonnegative")
    if cfg["eval"]["repeats"] < 1:
        raise ConfigError("eval.repeats: must be >= 1")
    tc = cfg["eval"]["target_class"]
    if isinstance(tc, str) and tc != "round-robin":
        raise ConfigError(f"eval.target_class: expected an int or 'round-robin', got {tc!r}")
    if not cfg["substitute"]["widths"]:
        raise ConfigError("substitute.widths: needs at least one block")


def experiment_part(cfg: dict) -> dict:
    return {k: cfg[k] for k in FINGERPRINT_KEYS}


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(v) if isinstance(v, str) else str(v)


def dump_toml(cfg: dict) -> str:
    lines = [f"{k} = {_toml_value(v)}" for k, v in cfg.items() if not isinstance(v, dict)]
    for section, table in cfg.items():
        if isinstance(table, dict):
            lines.append(f"\n[{section}]")
            lines += [f"{k} = {_toml_value(v)}" for k, v in table.items()]
    return "\n".join(lines) + "\n"


def write_resolved(cfg: dict, run_dir) -> Path:
    path = Path(run_dir) / "config.resolved.toml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_toml(cfg), encoding="utf-8")
    return path
