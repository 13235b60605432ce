"""Experiment configuration: JSON document, schema validation, seed splitting."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .decoder import DecoderSpec
from .errors import ConfigError, InvalidArgument
from .glo import PretrainConfig, default_batch_schedule
from .recon import LOSS_KINDS, ReconConfig
from .tomo import Geometry

METHODS = ("cglo", "dip", "tv", "fbp", "csgm-toy")
TOY_SCORES = ("gaussian",)
OUT_ENV = "CT_OUT_DIR"

_RECON_FIELDS = {
    "steps": {"type": "integer", "minimum": 1},
    "lr_latent": {"type": "number", "exclusiveMinimum": 0},
    "lr_weights": {"type": "number", "exclusiveMinimum": 0},
    "loss_kind": {"enum": list(LOSS_KINDS)},
    "augment_factor": {"type": "integer", "minimum": 1},
    "batch_size": {"type": "integer", "minimum": 1},
    "tv_alpha": {"type": "number", "minimum": 0},
    "tv_epsilon": {"type": "number", "exclusiveMinimum": 0},
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "output_dir": {"type": "string"},
        "master_seed": {"type": "integer", "minimum": 0},
        "geometry": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "size": {"type": "integer", "minimum": 8},
                "n_detectors": {"type": "integer", "minimum": 1},
                "detector_spacing": {"type": "number", "exclusiveMinimum": 0},
                "pixel_spacing": {"type": "number", "exclusiveMinimum": 0},
                "ray_step": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "decoder": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "latent_dim": {"type": "integer", "minimum": 2},
                "base_channels": {"type": "integer", "minimum": 2},
            },
        },
        "dataset": {
            "oneOf": [
                {"type": "object", "additionalProperties": False,
                 "required": ["kind"],
                 "properties": {
                     "kind": {"const": "phantoms"},
                     "n_scans": {"type": "integer", "minimum": 2},
                     "n_slices": {"type": "integer", "minimum": 2},
                     "n_ellipses": {"type": "integer", "minimum": 1},
                 }},
                {"type": "object", "additionalProperties": False,
                 "required": ["kind", "path"],
                 "properties": {
                     "kind": {"const": "images"},
                     "path": {"type": "string"},
                 }},
            ],
        },
        "split_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "angle_counts": {"type": "array", "minItems": 1, "uniqueItems": True,
                         "items": {"type": "integer", "minimum": 1}},
        "noise_i0": {"type": ["number", "null"], "minimum": 1},
        "pretrain": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "lr_latent": {"type": "number", "minimum": 0},
                "lr_weights": {"type": "number", "minimum": 0},
                "batch_start": {"type": "integer", "minimum": 1},
                "checkpoint_every": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "recon": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "cglo": {"type": "object", "additionalProperties": False,
                         "properties": _RECON_FIELDS},
                "dip": {"type": "object", "additionalProperties": False,
                        "properties": {**_RECON_FIELDS,
                                       "base_channels": {"type": "integer", "minimum": 2}}},
                "tv": {"type": "object", "additionalProperties": False,
                       "properties": {"alpha": {"type": "number", "minimum": 0},
                                      "steps": {"type": "integer", "minimum": 1},
                                      "lr": {"type": "number", "exclusiveMinimum": 0},
                                      "tv_epsilon": {"type": "number", "exclusiveMinimum": 0}}},
                "fbp": {"type": "object", "additionalProperties": False,
                        "properties": {"filter": {"enum": ["ram-lak", "hann"]}}},
                "csgm-toy": {"type": "object", "additionalProperties": False,
                             "properties": {"score": {"type": "string"},
                                            "lam": {"type": "number", "minimum": 0, "maximum": 1},
                                            "n_steps": {"type": "integer", "minimum": 1},
                                            "full_angles": {"type": "integer", "minimum": 1},
                                            "std": {"type": "number", "exclusiveMinimum": 0}}},
            },
        },
    },
}

DEFAULTS = {
    "output_dir": "runs/default",
    "master_seed": 0,
    "geometry": {"size": 64, "detector_spacing": 1.0, "pixel_spacing": 1.0, "ray_step": 0.5},
    "decoder": {"latent_dim": 64, "base_channels": 128},
    "dataset": {"kind": "phantoms", "n_scans": 10, "n_slices": 8, "n_ellipses": 6},
    "split_fraction": 0.5,
    "angle_counts": [9, 23, 50, 100],
    "noise_i0": None,
    "pretrain": {"epochs": 100, "lr_latent": 1e-3, "lr_weights": 1e-3, "batch_start": 16,
                 "checkpoint_every": None},
    "recon": {
        "cglo": {},
        "dip": {"steps": 2000, "lr_weights": 3e-3, "tv_alpha": 10.0, "base_channels": 64},
        "tv": {"alpha": 1.0, "steps": 300, "lr": 1e-2, "tv_epsilon": 1e-6},
        "fbp": {"filter": "ram-lak"},
        "csgm-toy": {"score": "gaussian", "lam": 0.9, "n_steps": 50, "full_angles": 180,
                     "std": 0.1},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "dataset":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def stage_seed(master_seed: int, stage: str) -> int:
    """Stable 32-bit seed for ``stage`` derived from the master seed."""
    digest = hashlib.sha256(f"{int(master_seed)}/{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class ExperimentConfig:
    """Validated experiment document with defaults filled in."""

    doc: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    source: Path | None = None

    @classmethod
    def from_dict(cls, raw: dict, source: Path | None = None) -> "ExperimentConfig":
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        doc = _merge(DEFAULTS, raw)
        if doc["dataset"]["kind"] == "phantoms":
            doc["dataset"] = {**DEFAULTS["dataset"], **doc["dataset"]}
        cfg = cls(doc, source)
        cfg._check()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(raw, path)

    def _check(self) -> None:
        try:
            self.geometry()
            self.decoder_spec()
            if self.dip_base_channels % 2:
                raise InvalidArgument("recon.dip.base_channels must be even")
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from None
        ds = self.doc["dataset"]
        if ds["kind"] == "images":
            p = self.resolve(ds["path"])
            if not p.is_dir():
                raise ConfigError(f"dataset path {p} is not a directory")
        score = self.doc["recon"]["csgm-toy"]["score"]
        if score not in TOY_SCORES:
            raise ConfigError(f"unknown toy score {score!r}; built-in scores: {TOY_SCORES}")

    def resolve(self, p) -> Path:
        p = Path(p)
        if p.is_absolute() or self.source is None:
            return p
        return self.source.parent / p

    # -- accessors ----------------------------------------------------------

    @property
    def master_seed(self) -> int:
        return int(self.doc["master_seed"])

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        if seed is None:
            return self
        doc = copy.deepcopy(self.doc)
        doc["master_seed"] = int(seed)
        return ExperimentConfig(doc, self.source)

    def output_root(self) -> Path:
        env = os.environ.get(OUT_ENV)
        return Path(env) if env else self.resolve(self.doc["output_dir"])

    @property
    def size(self) -> int:
        return int(self.doc["geometry"]["size"])

    @property
    def angle_counts(self) -> list[int]:
        return [int(a) for a in self.doc["angle_counts"]]

    @property
    def split_fraction(self) -> float:
        return float(self.doc["split_fraction"])

    @property
    def noise_i0(self) -> float | None:
        return self.doc["noise_i0"]

    def geometry(self) -> Geometry:
        g = self.doc["geometry"]
        if "n_detectors" in g:
            geo = Geometry(g["n_detectors"], g["detector_spacing"], g["pixel_spacing"],
                           g["ray_step"])
        else:
            geo = Geometry.for_size(self.size, g["detector_spacing"], g["pixel_spacing"],
                                    g["ray_step"])
        geo.check(self.size)
        return geo

    def decoder_spec(self, base_channels: int | None = None) -> DecoderSpec:
        d = self.doc["decoder"]
        return DecoderSpec(d["latent_dim"], base_channels or d["base_channels"], self.size)

    @property
    def dip_base_channels(self) -> int:
        return int(self.doc["recon"]["dip"].get("base_channels", self.doc["decoder"]["base_channels"]))

    def pretrain_config(self) -> PretrainConfig:
        p = self.doc["pretrain"]
        return PretrainConfig(
            epochs=p["epochs"], lr_latent=p["lr_latent"], lr_weights=p["lr_weights"],
            batch_schedule=default_batch_schedule(p["epochs"], p["batch_start"]),
            seed=stage_seed(self.master_seed, "pretrain"),
            checkpoint_every=p["checkpoint_every"])

    def recon_config(self, method: str, seed: int) -> ReconConfig:
        fields = {k: v for k, v in self.doc["recon"][method].items() if k != "base_channels"}
        return ReconConfig(seed=seed, **fields)

    def method_options(self, method: str) -> dict:
        return dict(self.doc["recon"][method])
