"""Experiment configuration: the JSON schema and loading with validation."""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import jsonschema

__all__ = ["CONFIG_SCHEMA", "ConfigError", "load_config", "validate_config"]


class ConfigError(ValueError):
    """The configuration is missing, malformed or fails the schema."""


_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}

_family_params = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "contrast_scale": {"type": "number", "minimum": 0},
        "n_points": {"type": "integer", "minimum": 0},
        "sigma": _pos_num,
        "amp": _pos_num,
        "contrast": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "count": {"type": "integer", "minimum": 0},
    },
}

_solver = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "L_c": _pos_num,
        "refine": _pos_int,
        "pml_width": {"type": "integer", "minimum": 10},
        "pml_thickness": _pos_num,
        "pml_order": _pos_int,
        "pml_intensity": _pos_num,
        "solver_tol": _pos_num,
        "receiver": {"enum": ["sample", "pattern"]},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "wbe experiment configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "family": {"enum": ["shepp-logan", "smooth", "tri3", "tri5", "tri10"]},
                "N": _pos_int,
                "n_eta": {"type": "integer", "minimum": 4},
                "n_sc": _pos_int,
                "n_rho": _pos_int,
                "R": _pos_num,
                "freqs": {"type": "array", "items": _pos_num, "minItems": 1},
                "params": _family_params,
                "forward": {"enum": ["pde", "born"]},
                "solver": _solver,
            },
        },
        "fbp": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epsilon": _pos_num,
                "relative": {"type": "boolean"},
                "cg_tol": _pos_num,
                "cg_max_iter": _pos_int,
                "operator": {"enum": ["composed", "grid"]},
                "freq_subset": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "images": {"type": "boolean"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["uncompressed", "compressed"]},
                "lr": _pos_num,
                "batch": _pos_int,
                "epochs": {"type": "integer", "minimum": 0},
                "decay_rate": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "decay_steps": _pos_int,
                "init": {"enum": ["glorot", "kernel-init"]},
                "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "freq_subset": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "L": {"type": "integer", "minimum": 0},
                "r": _pos_int,
                "n_sr": {"type": "integer", "minimum": 0},
                "conv_kernel": _pos_int,
                "conv_channels": {"type": "array", "items": _pos_int},
                "conv_symmetry": {"enum": ["none", "c4"]},
                "checkpoint": {"type": "string"},
            },
        },
        "rotate_test": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "quarter_turns": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "checkpoint": {"type": "string"},
                "resimulate": {"type": "boolean"},
                "retrain": {"type": "boolean"},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sizes": {"type": "array", "items": _pos_int, "minItems": 1},
                "freq_sets": {"type": "array", "minItems": 1,
                              "items": {"type": "array", "minItems": 1,
                                        "items": {"type": "integer", "minimum": 0}}},
            },
        },
        "export": {
            "type": "object",
            "additionalProperties": False,
            "required": ["tensor"],
            "properties": {
                "tensor": {"type": "string"},
                "format": {"enum": ["pgm", "csv"]},
                "index": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "part": {"enum": ["real", "imag", "abs"]},
            },
        },
    },
}


def validate_config(cfg: dict) -> dict:
    """Validate against :data:`CONFIG_SCHEMA`; raise :class:`ConfigError` with the first problem."""
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    return cfg


def load_config(path, env=None) -> dict:
    """Read, validate and apply the ``WBE_SEED`` override."""
    env = os.environ if env is None else env
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    cfg = validate_config(cfg)
    cfg = copy.deepcopy(cfg)
    if env.get("WBE_SEED"):
        try:
            cfg["seed"] = int(env["WBE_SEED"])
        except ValueError:
            raise ConfigError(f"WBE_SEED={env['WBE_SEED']!r} is not an integer") from None
        validate_config(cfg)
    return cfg
