"""JSON experiment configuration: schema, validation and conversion to RunConfig.

A minimal config::

    {
      "run_id": "synthetic-expression",
      "data": {"synthetic": {"task": "expression", "n": 2000, "noise": 0.3}},
      "network": {"preset": "plain-small"},
      "distill": {"modes": ["standard_kd", "triplet_kd"], "lambda": 0.7, "tau": 2.0}
    }

Everything else has a default (see ``SCHEMA``). ``distill.overrides`` holds
per-mode replacements of the shared distillation fields, e.g.
``{"triplet_kd": {"lambda": 0.5, "lr": 0.001}}``. ``data.synthetic.seed``
defaults to the run seed, so a seed override also regenerates the data.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import jsonschema

from .losses import DistillConfig
from .mining import MiningConfig
from .nn import NetworkSpec, preset
from .trainer import RunConfig

SEED_ENV = "DISTILLKIT_SEED"

_DISTILL_FIELDS = {
    "lambda": {"type": "number", "minimum": 0, "maximum": 1},
    "tau": {"type": "number", "minimum": 1},
    "margin_alpha": {"type": "number", "minimum": 0},
    "normalize_embeddings": {"type": "boolean"},
    "triplet_reduction": {"enum": ["mean", "sum"]},
    "lr": {"type": "number", "exclusiveMinimum": 0},
}
_MODES = ["standard_kd", "hint_kd", "triplet_kd"]

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data", "network"],
    "properties": {
        "run_id": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "seed": {"type": "integer", "minimum": 0},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["task", "n", "noise"],
                    "properties": {
                        "task": {"enum": ["expression", "gender", "age"]},
                        "n": {"type": "integer", "minimum": 10},
                        "noise": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "label_noise": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "num_classes": {"type": "integer", "minimum": 2},
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
            },
            "oneOf": [{"required": ["path"]}, {"required": ["synthetic"]}],
        },
        "occlusion": {"enum": ["none", "upper_half_hidden", "lower_half_hidden"]},
        "network": {
            "type": "object",
            "properties": {
                "preset": {"enum": ["plain-small", "residual-small"]},
                "spec": {"type": "object"},
                "embedding_dim": {"type": "integer", "minimum": 1},
            },
            "oneOf": [{"required": ["preset"]}, {"required": ["spec"]}],
        },
        "stage_epochs": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 3, "maxItems": 3},
        "optimizer": {"enum": ["sgd_momentum", "adam"]},
        "lr": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 3, "maxItems": 3},
        "lr_patience": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "distill": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "modes": {"type": "array", "items": {"enum": _MODES}, "minItems": 1, "uniqueItems": True},
                **_DISTILL_FIELDS,
                "overrides": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        m: {"type": "object", "additionalProperties": False, "properties": _DISTILL_FIELDS}
                        for m in _MODES
                    },
                },
            },
        },
        "mining": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "pos_subset_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "neg_subset_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "regression_pos_threshold": {"type": "number", "exclusiveMinimum": 0},
                "per_anchor_subsets": {"type": "boolean"},
            },
        },
        "ensemble": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "c_grid": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "standardize": {"type": "boolean"},
            },
        },
    },
}

DEFAULTS = {
    "run_id": "run",
    "seed": 0,
    "occlusion": "upper_half_hidden",
    "stage_epochs": [30, 20, 10],
    "lr": [0.01, 0.01, 0.01],
    "lr_patience": 10,
    "batch_size": 32,
    "distill": {"modes": ["standard_kd"], "lambda": 0.7, "tau": 2.0, "margin_alpha": 0.2},
    "mining": {},
    "ensemble": {"enabled": False, "c_grid": [0.1, 1, 10, 100, 1000], "epochs": 200, "standardize": False},
}


class ConfigError(ValueError):
    """Config failed validation; ``path`` is the dotted location of the problem."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate(raw: dict) -> dict:
    """Check ``raw`` against the schema and return it with defaults filled in."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigError(".".join(str(p) for p in err.absolute_path), err.message)
    cfg = _merge(DEFAULTS, raw)
    if "optimizer" not in cfg:
        # plain stacks train with momentum SGD, residual ones with Adam
        residual = cfg["network"].get("preset") == "residual-small" or any(
            b.get("type") == "residual_block" for b in cfg["network"].get("spec", {}).get("blocks", []))
        cfg["optimizer"] = "adam" if residual else "sgd_momentum"
    # semantic checks the schema cannot express
    if "spec" in cfg["network"]:
        try:
            NetworkSpec.from_dict(cfg["network"]["spec"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError("network.spec", str(exc)) from exc
    return cfg


def load_config(path, seed_override: int | None = None) -> dict:
    """Read, validate and apply the seed override (argument, then ``DISTILLKIT_SEED``).

    A relative ``data.path`` is resolved against the config file's directory.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")
    if seed_override is None and os.environ.get(SEED_ENV):
        try:
            seed_override = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError("seed", f"{SEED_ENV} is not an integer") from exc
    if seed_override is not None:
        raw = dict(raw, seed=seed_override)
    cfg = validate(raw)
    data_path = cfg["data"].get("path")
    if data_path is not None and not Path(data_path).is_absolute():
        cfg["data"]["path"] = str((Path(path).resolve().parent / data_path).resolve())
    return cfg


def config_hash(cfg: dict) -> str:
    """Content hash of the canonical JSON form; changes iff the config changes."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def distill_configs(cfg: dict) -> list[DistillConfig]:
    d = cfg["distill"]
    out = []
    for mode in d["modes"]:
        fields = {k: v for k, v in d.items() if k in _DISTILL_FIELDS}
        fields.update(d.get("overrides", {}).get(mode, {}))
        lam = fields.pop("lambda", 0.7)
        out.append(DistillConfig(mode=mode, lam=lam, **fields))
    return out


def network_spec(cfg: dict, task: str, num_classes: int | None) -> NetworkSpec:
    head = "classifier" if num_classes is not None else "regressor"
    net = cfg["network"]
    if "spec" in net:
        spec = NetworkSpec.from_dict(net["spec"])
        return spec.with_head(head, num_classes or 2)
    spec = preset(net["preset"], head=head, num_classes=num_classes or 2)
    if "embedding_dim" in net:
        spec = NetworkSpec.from_dict({**spec.to_dict(), "embedding_dim": net["embedding_dim"]})
    return spec


def run_config(cfg: dict, task: str, num_classes: int | None) -> RunConfig:
    modes = distill_configs(cfg)
    mining = MiningConfig.for_task(task, seed=cfg["seed"], **cfg["mining"])
    return RunConfig(
        spec=network_spec(cfg, task, num_classes),
        occlusion=cfg["occlusion"],
        stage_epochs=tuple(cfg["stage_epochs"]),
        optimizer=cfg["optimizer"],
        lr=tuple(float(x) for x in cfg["lr"]),
        lr_patience=cfg["lr_patience"],
        batch_size=cfg["batch_size"],
        distill=modes[0],
        mining=mining,
        seed=cfg["seed"],
    )
