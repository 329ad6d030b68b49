"""Experiment configuration files.

A config is one JSON object with up to four sections; every section and key
is optional and falls back to the library default, but unknown names are
errors so a misspelt hyperparameter never passes silently::

    {
      "synth": {"image_size": 64, "num_shapes": 4, "num_contexts": 2,
                "shape_scale_range": [0.001, 0.3], "samples_per_class": 1000,
                "noise_std": 0.05, "halo_width": 1, "num_distractors": 0,
                "test_fraction": 0.2},
      "model": {"stem_channels": 16, "stage_channels": [16, 32, 64],
                "blocks_per_stage": 2},
      "train": {"epochs": 20, "batch_size": 64, "lr": 0.05, "momentum": 0.9,
                "weight_decay": 1e-4, "lr_decay": [0.1, 15], "eval_every": 1},
      "eval":  {"edges": [0, 64, 128, 256, 512, 1024, 2048, 4096],
                "footer": "records", "batch_size": 256}
    }

``model.input_size``, ``model.input_channels`` and ``model.num_classes`` may
be given, but default to whatever the dataset holds. Seeds never live in a
config; they are passed on the command line.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .data import SynthConfig
from .metrics import DESK_EDGES
from .models import BackboneConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    edges: Tuple[int, ...] = DESK_EDGES
    footer: str = "records"
    batch_size: int = 256

    def __post_init__(self):
        self.edges = tuple(int(e) for e in self.edges)
        if self.footer not in ("records", "buckets"):
            raise ValueError(f"footer must be 'records' or 'buckets', got {self.footer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {"edges": list(self.edges), "footer": self.footer, "batch_size": self.batch_size}


_MODEL_KEYS = {f.name for f in dataclasses.fields(BackboneConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}


@dataclass
class ExperimentConfig:
    synth: Dict[str, Any] = field(default_factory=dict)
    model: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    eval: Dict[str, Any] = field(default_factory=dict)

    def synth_config(self) -> SynthConfig:
        return _build("synth", SynthConfig, self.synth)

    def train_config(self, seed: int) -> TrainConfig:
        return _build("train", TrainConfig, {**self.train, "seed": seed})

    def eval_config(self) -> EvalConfig:
        return _build("eval", EvalConfig, self.eval)

    def backbone_config(self, *, input_size: int, input_channels: int, num_classes: int) -> BackboneConfig:
        data_derived = {"input_size": input_size, "input_channels": input_channels, "num_classes": num_classes}
        for key, value in data_derived.items():
            if key in self.model and self.model[key] != value:
                raise ConfigError(f"model.{key}={self.model[key]} does not match the dataset ({value})")
        return _build("model", BackboneConfig, {**self.model, **data_derived})

    def to_dict(self) -> dict:
        """Fully resolved snapshot (defaults filled in) for run manifests."""
        return {
            "synth": self.synth_config().to_dict(),
            "model": dict(self.model),
            "train": {k: v for k, v in self.train_config(0).to_dict().items() if k != "seed"},
            "eval": self.eval_config().to_dict(),
        }


_SECTIONS = {"synth": None, "model": _MODEL_KEYS, "train": _TRAIN_KEYS, "eval": {"edges", "footer", "batch_size"}}


def _build(section: str, cls, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(obj: Any, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"{source}: top level must be an object")
    unknown = set(obj) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}; expected {sorted(_SECTIONS)}")
    allowed = dict(_SECTIONS, synth={f.name for f in dataclasses.fields(SynthConfig)})
    for section, values in obj.items():
        if not isinstance(values, dict):
            raise ConfigError(f"{source}: section {section!r} must be an object")
        bad = set(values) - allowed[section]
        if bad:
            hint = " (seeds are given with --seed/--seeds)" if "seed" in bad else ""
            raise ConfigError(f"{source}: unknown key(s) {sorted(bad)} in [{section}]{hint}; allowed: {sorted(allowed[section])}")
    cfg = ExperimentConfig(**{k: dict(v) for k, v in obj.items()})
    # surface value errors now rather than halfway through a run
    cfg.synth_config()
    cfg.train_config(0)
    cfg.eval_config()
    if cfg.model:
        _build("model", BackboneConfig, {**cfg.model})
    return cfg


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON ({exc})") from None
    return parse_config(obj, str(p))
