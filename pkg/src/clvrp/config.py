"""Run configuration: TOML file, flag overrides, built-in defaults.

File layout::

    [train]      # TrainConfig fields: problem, alpha, replay, regularization,
                 # intra_interval, kl_form, n_starts, optimizer, lr, seed,
                 # warmup_epochs, initial_exemplar, capacity
    [schedule]   # sizes, epochs, steps_per_epoch, batch_size, batch_threshold
    [policy]     # embed_dim, n_heads, n_encoder_layers, feedforward_dim, logit_clip, dtype
    [eval]       # sizes, count, seed, n_starts, augmentation, reference

Flags override file values, which override the defaults.
"""
from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .policy import InvalidConfigError, PolicyConfig
from .trainer import SizeSchedule, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalSettings:
    sizes: list[int] | None = None  # None: the training sizes
    count: int | None = None  # None: desk-scale count per size
    seed: int = 2024
    n_starts: int | None = None
    augmentation: bool = True
    reference: bool = False


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "eval": asdict(self.eval)}

    def hash(self) -> str:
        return self.train.hash()


SECTIONS = {
    "train": {f.name for f in dataclasses.fields(TrainConfig)} - {"schedule", "policy"},
    "schedule": {f.name for f in dataclasses.fields(SizeSchedule)},
    "policy": {f.name for f in dataclasses.fields(PolicyConfig)} - {"problem"},
    "eval": {f.name for f in dataclasses.fields(EvalSettings)},
}


def read_file(path: str | Path) -> dict[str, dict[str, Any]]:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section, values in data.items():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: [{section}] must be a table")
        unknown = set(values) - SECTIONS[section]
        if unknown:
            raise ConfigError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
    return data


def parse_override(text: str) -> tuple[str, str, Any]:
    """``section.key=value`` with a TOML-typed value (bare words become strings)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    lhs, rhs = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    if section not in SECTIONS or key not in SECTIONS[section]:
        raise ConfigError(f"unknown config key {lhs!r}")
    try:
        value = tomllib.loads(f"v = {rhs}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    return section, key, value


def build(file_values: dict | None = None, overrides: list[tuple[str, str, Any]] = ()) -> RunConfig:
    merged: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    for section, values in (file_values or {}).items():
        merged[section].update(values)
    for section, key, value in overrides:
        merged[section][key] = value
    try:
        schedule = SizeSchedule(**merged["schedule"])
        policy = PolicyConfig(problem=merged["train"].get("problem", "tsp"), **merged["policy"])
        train = TrainConfig(schedule=schedule, policy=policy, **merged["train"])
        settings = EvalSettings(**merged["eval"])
    except (TypeError, ValueError, InvalidConfigError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(train, settings)


def load(path: str | Path | None, overrides: list[tuple[str, str, Any]] = ()) -> RunConfig:
    return build(read_file(path) if path else None, overrides)


def from_manifest(manifest: dict) -> RunConfig:
    t = dict(manifest["config"]["train"])
    schedule = SizeSchedule(**t.pop("schedule"))
    policy = PolicyConfig(**t.pop("policy"))
    return RunConfig(TrainConfig(schedule=schedule, policy=policy, **t),
                     EvalSettings(**manifest["config"]["eval"]))


def dumps(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True)
