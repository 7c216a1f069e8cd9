"""Pipeline config: one JSON file, schema-validated before any stage runs."""
from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ConfigurationError
from .scene import DIMENSIONS

_vec3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_rgb = {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3}
_range = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_object = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "name": {"type": "string"},
        "kind": {"enum": ["cube", "cylinder", "cone", "sphere", "torus_segment", "mug"]},
        "params": {"type": "object"},
        "translate": _vec3,
        "rotate_deg": _vec3,
        "albedo": _rgb,
        "class_tag": {"type": "string"},
    },
}

SCHEMA = {
    "type": "object",
    "required": ["scene", "classes", "distributions", "attack", "eval"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "scene": {
            "type": "object",
            "required": ["objects", "light", "camera", "patch"],
            "properties": {
                "objects": {"type": "array", "items": _object, "minItems": 1},
                "light": {"type": "object", "required": ["position", "color"],
                          "properties": {"position": _vec3, "color": _rgb, "ambient": _rgb}},
                "camera": {"type": "object", "required": ["position", "look_at"],
                           "properties": {"position": _vec3, "look_at": _vec3, "up": _vec3,
                                          "vertical_fov_deg": {"type": "number", "exclusiveMinimum": 0,
                                                               "exclusiveMaximum": 180},
                                          "resolution": {"type": "array", "items": {"type": "integer",
                                                                                    "minimum": 16},
                                                         "minItems": 2, "maxItems": 2}}},
                "patch": {"type": "object", "required": ["radius", "z_lo", "z_hi", "phi_span_deg"],
                          "properties": {"radius": {"type": "number", "exclusiveMinimum": 0},
                                         "z_lo": {"type": "number"}, "z_hi": {"type": "number"},
                                         "phi_center_deg": {"type": "number"},
                                         "phi_span_deg": {"type": "number", "exclusiveMinimum": 0,
                                                          "exclusiveMaximum": 360},
                                         "segments": {"type": "integer", "minimum": 1},
                                         "host_height": {"type": "number"}}},
                "background_color": _rgb,
            },
        },
        "classes": {
            "type": "object",
            "required": ["original", "prototypes"],
            "properties": {"original": {"type": "string"},
                           "prototypes": {"type": "array", "items": _object, "minItems": 3}},
        },
        "distributions": {"type": "object", "propertyNames": {"enum": list(DIMENSIONS)},
                          "additionalProperties": _range},
        "dataset": {"type": "object", "properties": {"n_per_class": {"type": "integer", "minimum": 50},
                                                      "val_fraction": {"type": "number", "exclusiveMinimum": 0,
                                                                       "exclusiveMaximum": 1}}},
        "classifier": {"type": "object",
                       "properties": {"epochs": {"type": "integer", "minimum": 1},
                                      "lr": {"type": "number", "exclusiveMinimum": 0},
                                      "batch": {"type": "integer", "minimum": 1},
                                      "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                                      "weight_decay": {"type": "number", "minimum": 0},
                                      "channels": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                                   "minItems": 3, "maxItems": 3}}},
        "attack": {
            "type": "object",
            "required": ["targets"],
            "properties": {
                "targets": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "kappa": {"type": "number", "minimum": 0},
                "lambda_tv": {"type": "number", "minimum": 0},
                "iterations": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "patch_shape": {"type": "array", "items": {"type": "integer", "minimum": 2},
                                "minItems": 2, "maxItems": 2},
                "init": {"enum": ["gray", "noise"]},
                "n_views": {"type": "integer", "minimum": 1},
                "systematic_counts": {"type": "object", "propertyNames": {"enum": list(DIMENSIONS)},
                                      "additionalProperties": {"type": "integer", "minimum": 1}},
                "n_val_views": {"type": "integer", "minimum": 1},
                "eval_every": {"type": "integer", "minimum": 1},
                "fool_threshold": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "eval": {"type": "object", "required": ["ranges", "counts"],
                 "properties": {"ranges": {"type": "object", "propertyNames": {"enum": list(DIMENSIONS)},
                                           "additionalProperties": _range},
                                "counts": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                                "host_tag": {"type": "string"}}},
        "holdout": {"type": "object",
                    "properties": {"suite": {"type": "array", "items": {
                        "enum": ["identity", "patch_up", "patch_down", "mat_red", "mat_wood", "object_color",
                                 "object_shape", "flipped"]}},
                        "patch_shift": {"type": "number", "minimum": 0},
                        "red_albedo": _rgb, "wood_albedo": _rgb, "object_albedo": _rgb, "shape_albedo": _rgb,
                        "shape_mug": {"type": "object"}, "mat_tag": {"type": "string"}}},
    },
}


def default_config() -> dict:
    text = resources.files("patchforge").joinpath("data/default_config.json").read_text()
    return json.loads(text)


def _path(err) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def validate(cfg: dict) -> dict:
    """Schema check plus the cross-field rules a schema cannot express."""
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigurationError(f"config field {_path(exc)}: {exc.message}") from None
    names = [p.get("name") for p in cfg["classes"]["prototypes"]]
    if None in names or len(set(names)) != len(names):
        raise ConfigurationError("config field classes/prototypes: every prototype needs a unique name")
    if cfg["classes"]["original"] not in names:
        raise ConfigurationError("config field classes/original: not one of the prototypes")
    for t in cfg["attack"]["targets"]:
        if t not in names or t == cfg["classes"]["original"]:
            raise ConfigurationError(f"config field attack/targets: {t!r} is not a non-original class")
    for k in cfg["attack"].get("systematic_counts", {}):
        if k not in cfg["distributions"]:
            raise ConfigurationError(f"config field attack/systematic_counts/{k}: no distribution for it")
    if len(cfg["eval"]["counts"]) != len(cfg["eval"]["ranges"]):
        raise ConfigurationError("config field eval/counts: one count per range is required")
    for section, rng in (("distributions", cfg["distributions"]), ("eval/ranges", cfg["eval"]["ranges"])):
        for k, (lo, hi) in rng.items():
            if lo > hi:
                raise ConfigurationError(f"config field {section}/{k}: lower bound above upper bound")
    return cfg


def load_config(path=None) -> dict:
    if path is None:
        return validate(default_config())
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: invalid JSON ({exc})") from None
    return validate(cfg)


def canonical(cfg: dict) -> bytes:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg)).hexdigest()


def merged(cfg: dict, **section_overrides) -> dict:
    """Deep copy of ``cfg`` with ``section={key: value}`` overrides applied."""
    out = copy.deepcopy(cfg)
    for section, values in section_overrides.items():
        out.setdefault(section, {}).update(values)
    return out
