"""Experiment configuration loaded from YAML; unknown keys are rejected."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from ..augment import AugmentPolicy
from ..dataio import SynthConfig
from ..errors import ConfigError
from ..trainers import TrainConfig

DL_METHODS = ("baseline", "baseline_ce", "baseline_lr", "baseline_nn", "rfs_distill",
              "protonet", "relationnet", "maml", "simclr", "simclr_ce", "supcon", "supcon_ce",
              "baseline_tl", "baseline_ce_tl")
SCENARIO_METHODS = ("cnn2", "cnn4", "rf_unbounded", "rf_d10", "rf_d30")
WAY_METHODS = ("protonet", "baseline_nn")


def _strict(cls, d: Mapping | None, where: str):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class DataSource:
    """Either a CSV ``path`` or a ``synth`` generator configuration."""

    path: str | None = None
    packets: int | None = None
    features: int | None = None
    synth: SynthConfig | None = None

    def __post_init__(self):
        if (self.path is None) == (self.synth is None):
            raise ConfigError("dataset needs exactly one of 'path' or 'synth'")


@dataclass(frozen=True)
class PartitionCounts:
    train: int = 24
    val: int = 8
    test: int = 8


@dataclass(frozen=True)
class ScenarioConfig:
    folds: int = 3
    selections: int = 30
    selection_ways: int = 4
    unpopular_pool: int = 8
    restrict: str = "mask"
    scenarios: tuple = ("a", "b", "c")
    methods: tuple = ("cnn2", "rf_unbounded")

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("scenarios need at least 2 folds")
        if self.selections < 1 or self.selection_ways < 2:
            raise ConfigError("scenarios need selections >= 1 and selection_ways >= 2")
        if self.unpopular_pool < self.selection_ways:
            raise ConfigError("unpopular_pool must be at least selection_ways")
        if self.restrict not in ("mask", "none"):
            raise ConfigError(f"restrict must be 'mask' or 'none', got {self.restrict!r}")
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        object.__setattr__(self, "methods", tuple(self.methods))
        bad = set(self.scenarios) - {"a", "b", "c"}
        if bad or not self.scenarios:
            raise ConfigError(f"unknown scenarios {sorted(bad)}")
        unknown = set(self.methods) - set(SCENARIO_METHODS)
        if unknown or not self.methods:
            raise ConfigError(f"scenario methods must be drawn from {SCENARIO_METHODS}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DataSource
    partition: PartitionCounts = field(default_factory=PartitionCounts)
    methods: tuple = ("baseline_nn", "protonet")
    shot_grid: tuple = (5, 15, 50, 100, 200)
    test_ways: int = 4
    queries: int = 15
    episodes: int = 1000
    train_way_grid: tuple = (4, 8, 16)
    test_way_grid: tuple = (2, 4, 8)
    way_methods: tuple = WAY_METHODS
    way_shots: int = 200
    rf_reference_episodes: int = 20
    seeds: tuple = (0,)
    output_dir: str = "results"
    encoder: str = "cnn2"
    train: TrainConfig = field(default_factory=TrainConfig)
    forest_estimators: int = 100
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    scenarios: ScenarioConfig = field(default_factory=ScenarioConfig)

    def __post_init__(self):
        for name in ("methods", "shot_grid", "train_way_grid", "test_way_grid", "seeds",
                     "way_methods"):
            value = tuple(getattr(self, name))
            if not value:
                raise ConfigError(f"{name} must not be empty")
            object.__setattr__(self, name, value)
        unknown = set(self.methods) - set(DL_METHODS)
        if unknown:
            raise ConfigError(f"unimplemented method(s): {', '.join(sorted(unknown))}")
        if set(self.way_methods) - set(WAY_METHODS):
            raise ConfigError(f"way sweep supports only {WAY_METHODS}")
        if self.encoder not in ("cnn2", "cnn4"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if min(self.shot_grid) < 1 or self.queries < 1 or self.episodes < 1:
            raise ConfigError("shots, queries and episodes must be positive")
        if self.test_ways < 2 or min(self.test_way_grid) < 2 or min(self.train_way_grid) < 2:
            raise ConfigError("way counts must be >= 2")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ExperimentConfig":
        raw = dict(raw or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        if "dataset" not in raw:
            raise ConfigError("config needs a 'dataset' section")
        ds = dict(raw["dataset"] or {})
        if "synth" in ds and ds["synth"] is not None:
            ds["synth"] = _strict(SynthConfig, ds["synth"], "dataset.synth")
        raw["dataset"] = _strict(DataSource, ds, "dataset")
        nested = {"partition": PartitionCounts, "train": TrainConfig, "augment": AugmentPolicy,
                  "scenarios": ScenarioConfig}
        for key, typ in nested.items():
            if key in raw:
                raw[key] = _strict(typ, raw[key], key)
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return ExperimentConfig.from_dict(raw)
