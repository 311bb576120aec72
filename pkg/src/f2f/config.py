"""Run configuration: defaults, JSON schema and validation.

A config file is a JSON object; any key left out takes the default below.
The merged config is validated against :data:`SCHEMA` before any stage runs.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .mouth import DEFAULT_OMEGA


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "max_frames": None,  # cap on frames generated / processed by every stage
    "paths": {
        "prior": None,  # F2FPRIOR1 file; None generates the synthetic prior from prior.*
        "target": "target",  # sequence directory
        "source": None,  # sequence directory; None means self-reenactment (source = target)
        "out": "out",  # derived artifacts
    },
    "prior": {"n_subdiv": 3, "d_id": 8, "d_alb": 8, "d_exp": 12, "seed": 0},
    "weights": {"w_col": 1.0, "w_lan": 10.0, "w_reg": 2.5e-5},
    "synth": {
        "width": 64, "height": 64, "n_frames": 30, "landmark_noise": 0.5, "depth": 3.0,
        "sigma_rot": 0.06, "sigma_trans": 0.05, "sigma_gamma": 0.08, "max_step_sigmas": 0.2,
        "smoothness": 0.85, "mouth_interior": True, "focal_scale": 1.0,
    },
    "bundling": {
        "k": 6, "keyframes": "uniform",
        "schedule": [[1, 25, 4], [2, 5, 4], [3, 1, 4]],
        "step_halving": 0,
    },
    "tracking": {
        "schedule": [[2, 1, 4], [3, 7, 4]],
        "first_frame_schedule": [[1, 10, 4], [2, 10, 4], [3, 10, 4]],
        "divergence_threshold": 0.25, "gamma_smoothing": 0.5, "step_halving": 0,
        "role": "target",
    },
    "mouth": {
        "k": 10, "texture_size": 64, "omega": [list(p) for p in DEFAULT_OMEGA],
        "db_frames": None,  # [start, stop) of target frames; None = first half
        "min_visible": 0.5,
    },
    "reenact": {"frames": None},  # [start, stop); None = every frame
}

_schedule = {
    "type": "array", "minItems": 1,
    "items": {"type": "array", "minItems": 3, "maxItems": 3,
              "items": [{"type": "integer", "minimum": 0, "maximum": 3},
                        {"type": "integer", "minimum": 1}, {"type": "integer", "minimum": 1}]},
}
_range = {"oneOf": [{"type": "null"}, {"type": "array", "minItems": 2, "maxItems": 2,
                                        "items": {"type": "integer", "minimum": 0}}]}
_path = {"type": ["string", "null"]}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}

SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "f2f run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "max_frames": {"type": ["integer", "null"], "minimum": 1},
        "paths": {"type": "object", "additionalProperties": False, "properties": {
            "prior": _path, "target": {"type": "string"}, "source": _path, "out": {"type": "string"}}},
        "prior": {"type": "object", "additionalProperties": False, "properties": {
            "n_subdiv": {"type": "integer", "minimum": 0, "maximum": 6},
            "d_id": {"type": "integer", "minimum": 1}, "d_alb": {"type": "integer", "minimum": 1},
            "d_exp": {"type": "integer", "minimum": 1}, "seed": {"type": "integer", "minimum": 0}}},
        "weights": {"type": "object", "additionalProperties": False, "properties": {
            "w_col": _nonneg, "w_lan": _nonneg, "w_reg": _nonneg}},
        "synth": {"type": "object", "additionalProperties": False, "properties": {
            "width": {"type": "integer", "minimum": 8}, "height": {"type": "integer", "minimum": 8},
            "n_frames": {"type": "integer", "minimum": 1}, "landmark_noise": _nonneg, "depth": _pos,
            "sigma_rot": _nonneg, "sigma_trans": _nonneg, "sigma_gamma": _nonneg,
            "max_step_sigmas": _pos, "smoothness": {"type": "number", "minimum": 0, "maximum": 1},
            "mouth_interior": {"type": "boolean"}, "focal_scale": _pos}},
        "bundling": {"type": "object", "additionalProperties": False, "properties": {
            "k": {"type": "integer", "minimum": 1},
            "keyframes": {"enum": ["uniform", "diversity"]},
            "schedule": _schedule, "step_halving": {"type": "integer", "minimum": 0}}},
        "tracking": {"type": "object", "additionalProperties": False, "properties": {
            "schedule": _schedule, "first_frame_schedule": _schedule,
            "divergence_threshold": _pos, "gamma_smoothing": {"type": "number", "minimum": 0, "maximum": 1},
            "step_halving": {"type": "integer", "minimum": 0}, "role": {"enum": ["target", "source"]}}},
        "mouth": {"type": "object", "additionalProperties": False, "properties": {
            "k": {"type": "integer", "minimum": 1}, "texture_size": {"type": "integer", "minimum": 8},
            "omega": {"type": "array", "minItems": 1, "items": {
                "type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "integer", "minimum": 0}}},
            "db_frames": _range, "min_visible": {"type": "number", "minimum": 0, "maximum": 1}}},
        "reenact": {"type": "object", "additionalProperties": False, "properties": {"frames": _range}},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    for where, r in (("mouth/db_frames", cfg["mouth"]["db_frames"]), ("reenact/frames", cfg["reenact"]["frames"])):
        if r is not None and r[1] <= r[0]:
            raise ConfigError(f"config error at {where}: empty range {r}")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file, then ``overrides``; validated. Relative paths resolve
    against the config file's directory.
    """
    user = {}
    base_dir = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            user = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {p} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        base_dir = p.resolve().parent
    cfg = _merge(DEFAULTS, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    for k, v in cfg["paths"].items():
        if v is not None and not Path(v).is_absolute():
            cfg["paths"][k] = str(base_dir / v)
    return cfg
