"""Run configuration: one JSON document merging model, training, loss and
synthetic-data settings.

Precedence is command-line flags over the config file over built-in
defaults.  Every command writes the resolved document next to its outputs;
feeding that file back via ``--config`` reproduces the run.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .formats import atomic_write
from .losses import LossConfig
from .model import ModelConfig
from .synthetic import SynthConfig, preset
from .training import GridSpec, TrainConfig

RESOLVED_NAME = "resolved_config.json"

# Desk-scale benchmark defaults.  The learning rate is the grid value that
# trains the synthetic task reliably within the epoch budget.
BENCHMARK_MODEL = {"embed_dim": 16, "proj_dim": 16, "hidden_dim": 16}
BENCHMARK_TRAIN = {"learning_rate": 3e-4, "max_epochs": 15, "patience": 5}

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "loss": LossConfig, "synth": SynthConfig, "grid": GridSpec}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(**BENCHMARK_MODEL))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**BENCHMARK_TRAIN))
    loss: LossConfig = field(default_factory=LossConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    grid: GridSpec = field(default_factory=GridSpec)

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            section = getattr(self, name)
            d = {f.name: getattr(section, f.name) for f in fields(section)}
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / RESOLVED_NAME
        atomic_write(path, self.to_json().encode())
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return merge(cls(), d)


def _build(kind, current, updates: dict):
    known = {f.name for f in fields(kind)}
    unknown = set(updates) - known
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    try:
        return replace(current, **updates)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def merge(base: RunConfig, overrides: dict) -> RunConfig:
    """Apply a nested ``{section: {key: value}}`` dict on top of ``base``."""
    if not isinstance(overrides, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(overrides) - set(_SECTIONS) - {"preset"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = base
    if "preset" in overrides:
        cfg = replace(cfg, synth=preset(overrides["preset"]))
    for name, kind in _SECTIONS.items():
        upd = overrides.get(name)
        if upd is None:
            continue
        if not isinstance(upd, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        upd = {k: tuple(v) if isinstance(v, list) else v for k, v in upd.items()}
        cfg = replace(cfg, **{name: _build(kind, getattr(cfg, name), upd)})
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return merge(RunConfig(), raw)


def parse_assignment(text: str) -> tuple[str, str, object]:
    """Parse ``section.key=value``; the value is read as JSON when possible."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"expected section.key=value, got {text!r}")
    lhs, rhs = text.split("=", 1)
    section, key = lhs.split(".", 1)
    try:
        value = json.loads(rhs)
    except json.JSONDecodeError:
        value = rhs
    return section, key, value


def apply_assignments(cfg: RunConfig, assignments) -> RunConfig:
    nested: dict = {}
    for a in assignments or ():
        section, key, value = parse_assignment(a)
        nested.setdefault(section, {})[key] = value
    return merge(cfg, nested) if nested else cfg
