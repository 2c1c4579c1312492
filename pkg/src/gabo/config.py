"""Experiment configuration: JSON in, validated dataclass out, JSON back.

Every run writes its fully resolved config next to its outputs so results
can be reproduced from that file alone. Unknown keys are rejected rather
than ignored.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .augment import (GENERATION_TYPES, IDENTITY_TRANSFORM, TRANSFORM_TYPES,
                      AugmenterConfig)
from .graphs import DEFAULT_FRACTIONS, DEFAULT_VOCAB
from .models import GinClassifierConfig
from .training import REGIMES, BilevelConfig, FlagConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration fields."""


@dataclass
class ExperimentConfig:
    regime: str = "plain"
    generation_type: str = "gin"
    transform_type: str = "bias"
    dataset: str | None = None
    out_dir: str | None = None
    split_scheme: str = "random"
    fractions: tuple = DEFAULT_FRACTIONS
    seed: int = 0

    embed_dim: int = 256
    num_layers: int = 5
    gin_epsilon: float = 0.0
    hidden_mult: int = 2
    vocab_sizes: tuple = DEFAULT_VOCAB

    latent_dim: int = 10
    aug_hidden_dim: int = 128
    standardize_classic: bool = False

    epochs: int = 200
    patience: int = 30
    lr: float = 0.1
    momentum: float = 0.9
    milestones: tuple = (60, 120, 160)
    lr_factor: float = 0.2
    l2_classifier: float = 5e-4
    l2_augmenter: float = 0.01
    batch_size: int = 32

    outer_lr: float = 0.01
    outer_period: int = 10
    window: int = 4

    flag_steps: int = 3
    flag_step_size: float = 0.01
    flag_rule: str = "sign"

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        self.milestones = tuple(int(m) for m in self.milestones)
        self.vocab_sizes = tuple(int(v) for v in self.vocab_sizes)
        self.validate()

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime: expected one of {REGIMES}, got {self.regime!r}")
        if self.generation_type not in GENERATION_TYPES:
            raise ConfigError(f"generation_type: expected one of {GENERATION_TYPES}, "
                              f"got {self.generation_type!r}")
        if self.transform_type not in TRANSFORM_TYPES + (IDENTITY_TRANSFORM,):
            raise ConfigError(f"transform_type: expected one of {TRANSFORM_TYPES}, "
                              f"got {self.transform_type!r}")
        if self.split_scheme not in ("random", "scaffold"):
            raise ConfigError(f"split_scheme: expected random or scaffold, "
                              f"got {self.split_scheme!r}")
        if len(self.fractions) != 4 or any(f <= 0 for f in self.fractions):
            raise ConfigError(f"fractions: need four positive values, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"fractions: sum to {sum(self.fractions)}, expected 1")
        for name in ("embed_dim", "num_layers", "latent_dim", "epochs", "patience",
                     "batch_size", "outer_period", "window", "flag_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.window > self.outer_period:
            raise ConfigError(f"window: {self.window} exceeds outer_period "
                              f"{self.outer_period}")
        for name in ("lr", "outer_lr", "lr_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum: {self.momentum} outside [0, 1)")
        if self.flag_rule not in ("sign", "normalized"):
            raise ConfigError(f"flag_rule: expected sign or normalized, "
                              f"got {self.flag_rule!r}")

    # sub-config views used by the trainers

    def model_config(self) -> GinClassifierConfig:
        return GinClassifierConfig(embed_dim=self.embed_dim, num_layers=self.num_layers,
                                   epsilon=self.gin_epsilon, hidden_mult=self.hidden_mult,
                                   vocab_sizes=self.vocab_sizes)

    def augmenter_config(self) -> AugmenterConfig:
        return AugmenterConfig(generation_type=self.generation_type,
                               transform_type=self.transform_type,
                               latent_dim=self.latent_dim, embed_dim=self.embed_dim,
                               hidden_dim=self.aug_hidden_dim)

    def bilevel_config(self) -> BilevelConfig:
        return BilevelConfig(outer_lr=self.outer_lr, outer_period=self.outer_period,
                             window=self.window, inner_lr=self.lr,
                             momentum=self.momentum, l2_augmenter=self.l2_augmenter,
                             l2_classifier=self.l2_classifier, epochs=self.epochs,
                             patience=self.patience, milestones=self.milestones,
                             lr_factor=self.lr_factor)

    def flag_config(self) -> FlagConfig:
        return FlagConfig(ascent_steps=self.flag_steps, step_size=self.flag_step_size,
                          ascent_rule=self.flag_rule)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("fractions", "milestones", "vocab_sizes"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)


@dataclass
class GridSpec:
    """Axes of the generation x transform x seed ablation grid."""

    generation_types: tuple = GENERATION_TYPES
    transform_types: tuple = TRANSFORM_TYPES
    seeds: tuple = (0,)
    base_config: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.generation_types = tuple(self.generation_types)
        self.transform_types = tuple(self.transform_types)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.generation_types or not self.transform_types or not self.seeds:
            raise ConfigError("grid axes must be non-empty")
        for g in self.generation_types:
            if g not in GENERATION_TYPES:
                raise ConfigError(f"unknown generation_type {g!r} in grid")
        for t in self.transform_types:
            if t not in TRANSFORM_TYPES:
                raise ConfigError(f"unknown transform_type {t!r} in grid")

    def cells(self):
        for g in self.generation_types:
            for t in self.transform_types:
                yield g, t

    def cell_configs(self, gtype, ttype):
        for seed in self.seeds:
            data = dict(self.base_config)
            data.update({"regime": "gabo", "generation_type": gtype,
                         "transform_type": ttype, "seed": seed})
            yield ExperimentConfig.from_dict(data)

    @classmethod
    def from_json(cls, path) -> "GridSpec":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown grid keys: {', '.join(unknown)}")
        return cls(**data)
