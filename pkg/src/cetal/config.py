"""Declarative run configuration: one JSON document plus dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

from .backbone import ModelConfig
from .model import DEFAULT_THRESHOLDS, InferenceConfig
from .tensor import ConfigurationError
from .training import TrainConfig

SECTIONS = ("model", "training", "data", "eval", "inference")

DATA_DEFAULTS = {
    "train": None,  # manifest path
    "val": None,  # manifest path; None splits val_fraction off the train set
    "val_fraction": 0.25,
    "split_seed": 0,
    "clip_length_s": None,
    "overlap": 0.5,
    "augment": {"permutations": False, "axis_normalize": False, "transforms": []},
}

EVAL_DEFAULTS = {
    "thresholds": list(DEFAULT_THRESHOLDS),
    "confusion_threshold": 0.5,
    "confusion_min_score": 0.3,
}


def _names(cls):
    return {f.name for f in fields(cls)}


def default_config():
    return {
        "model": {},
        "training": {},
        "data": copy.deepcopy(DATA_DEFAULTS),
        "eval": copy.deepcopy(EVAL_DEFAULTS),
        "inference": {},
    }


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg, overrides):
    """Set ``section.key[.sub]=value`` pairs; values parse as JSON, else stay strings."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        parts = key.strip().split(".")
        if len(parts) < 2 or parts[0] not in SECTIONS:
            raise ConfigurationError(f"override key {key!r} must start with one of {', '.join(SECTIONS)}")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override key {key!r} descends into a non-object")
        node[parts[-1]] = parse_value(raw)
    return cfg


def _merge(base, update, where):
    for k, v in update.items():
        if k not in base:
            raise ConfigurationError(f"unknown key {where}.{k}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{where}.{k}")
        else:
            base[k] = v


class RunConfig:
    """Validated run configuration.

    ``model.input_channels`` and ``model.num_classes`` may be left out and
    filled from the dataset with :meth:`bind_dataset`.
    """

    def __init__(self, raw):
        if not isinstance(raw, dict):
            raise ConfigurationError("run config must be a JSON object")
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigurationError(f"unknown config sections: {', '.join(unknown)}")
        cfg = default_config()
        for sec in ("data", "eval"):
            _merge(cfg[sec], raw.get(sec) or {}, sec)
        for sec, cls in (("model", ModelConfig), ("training", TrainConfig), ("inference", InferenceConfig)):
            section = raw.get(sec) or {}
            if not isinstance(section, dict):
                raise ConfigurationError(f"section {sec} must be an object")
            bad = sorted(set(section) - _names(cls))
            if bad:
                raise ConfigurationError(f"unknown keys in {sec}: {', '.join(bad)}")
            cfg[sec] = dict(section)
        self.raw = cfg
        self.training = TrainConfig.from_dict(cfg["training"])
        self.inference = InferenceConfig.from_dict(cfg["inference"])
        self._check_eval()
        self._check_data()
        self.model = None
        if cfg["model"].get("input_channels") is not None and cfg["model"].get("num_classes") is not None:
            self.model = ModelConfig.from_dict(cfg["model"])
        else:
            # validate everything except the data-derived sizes now
            probe = dict(cfg["model"], input_channels=1, num_classes=1)
            ModelConfig.from_dict(probe)

    def _check_eval(self):
        ev = self.raw["eval"]
        th = ev["thresholds"]
        if not isinstance(th, list) or not th or any(not isinstance(t, (int, float)) or not 0 < t <= 1 for t in th):
            raise ConfigurationError(f"eval.thresholds must be a non-empty list in (0, 1], got {th!r}")
        if not 0 <= ev["confusion_threshold"] <= 1:
            raise ConfigurationError("eval.confusion_threshold must be in [0, 1]")

    def _check_data(self):
        d = self.raw["data"]
        if not 0 <= d["val_fraction"] < 1:
            raise ConfigurationError(f"data.val_fraction must be in [0, 1), got {d['val_fraction']}")
        if d["clip_length_s"] is not None and not d["clip_length_s"] > 0:
            raise ConfigurationError("data.clip_length_s must be positive or null")
        if not 0 <= d["overlap"] < 1:
            raise ConfigurationError("data.overlap must be in [0, 1)")
        aug = d["augment"]
        from .data import AugmentSpec

        try:
            AugmentSpec(bool(aug["permutations"]), bool(aug["axis_normalize"]), [tuple(t) for t in aug["transforms"]])
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"data.augment: {exc}") from exc

    @classmethod
    def load(cls, path=None, overrides=()):
        raw = {}
        if path is not None:
            path = Path(path)
            try:
                raw = json.loads(path.read_text())
            except FileNotFoundError as exc:
                raise ConfigurationError(f"config file not found: {path}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        return cls(apply_overrides(raw, overrides))

    def bind_dataset(self, input_channels, num_classes):
        m = dict(self.raw["model"])
        for key, value in (("input_channels", input_channels), ("num_classes", num_classes)):
            if m.get(key) is None:
                m[key] = value
            elif m[key] != value:
                raise ConfigurationError(f"model.{key}={m[key]} but the dataset has {value}")
        self.raw["model"] = m
        self.model = ModelConfig.from_dict(m)
        return self.model

    @property
    def data(self):
        return self.raw["data"]

    @property
    def eval(self):
        return self.raw["eval"]

    def augment_spec(self):
        from .data import AugmentSpec

        aug = self.data["augment"]
        return AugmentSpec(bool(aug["permutations"]), bool(aug["axis_normalize"]), [tuple(t) for t in aug["transforms"]])

    def to_dict(self):
        out = copy.deepcopy(self.raw)
        out["training"] = self.training.to_dict()
        out["inference"] = self.inference.to_dict()
        if self.model is not None:
            out["model"] = self.model.to_dict()
        return out
