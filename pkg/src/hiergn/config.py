"""Experiment configuration stored as a JSON document.

Schema (all keys optional, defaults shown by `ExperimentConfig().to_dict()`)::

    {
      "force_law": "gravity" | "coulomb",
      "n_particles": 20,
      "dataset": {"train": 100, "valid": 20, "test": 20},
      "sim": {<SimConfig overrides>},
      "model": "delta" | "hogn",
      "graph": "full" | "knn:<k>" | "hier" | "hier:<depth>" | "hier:<depth>:open",
      "train": {<TrainConfig fields>},
      "eval": {"taus": [20, 200]},
      "seed": 0
    }
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError, InvalidInputError
from .models import GraphSpec
from .sim import SimConfig
from .training import TrainConfig

CONFIG_VERSION = 1


@dataclass(frozen=True)
class ExperimentConfig:
    force_law: str = "gravity"
    n_particles: int = 20
    dataset: dict = field(default_factory=lambda: {"train": 100, "valid": 20, "test": 20})
    sim: dict = field(default_factory=dict)
    model: str = "delta"
    graph: str = "hier"
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=lambda: {"taus": [20, 200]})
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.sim_config()
            self.train_config()
            spec = self.graph_spec()
        except (InvalidInputError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.force_law not in ("gravity", "coulomb"):
            raise ConfigError(f"unknown force law {self.force_law!r}")
        if self.model not in ("delta", "hogn"):
            raise ConfigError(f"unknown model {self.model!r}")
        if spec.kind == "hier" and spec.depth is not None and spec.depth < 2:
            raise ConfigError("hierarchy depth must be at least 2")
        if not isinstance(self.n_particles, int) or self.n_particles < 1:
            raise ConfigError("n_particles must be a positive integer")
        for split in ("train", "valid", "test"):
            if int(self.dataset.get(split, 0)) < 0:
                raise ConfigError(f"dataset.{split} must be non-negative")
        taus = self.eval.get("taus", [])
        if not taus or any(int(t) < 1 for t in taus):
            raise ConfigError("eval.taus must be a non-empty list of positive integers")

    @property
    def charged(self) -> bool:
        return self.force_law == "coulomb"

    def sim_config(self) -> SimConfig:
        if "force_law" in self.sim and self.sim["force_law"] != self.force_law:
            raise ConfigError("sim.force_law disagrees with force_law")
        return SimConfig(**{**self.sim, "force_law": self.force_law})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train})

    def graph_spec(self) -> GraphSpec:
        return GraphSpec.parse(self.graph)

    @property
    def taus(self) -> tuple[int, ...]:
        return tuple(int(t) for t in self.eval["taus"])

    def to_dict(self) -> dict:
        return {"version": CONFIG_VERSION, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = dict(data)
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config version {version} is not supported")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path

    def override(self, **changes: Any) -> "ExperimentConfig":
        """Copy with top-level fields replaced (None values are ignored)."""
        return replace(self, **{k: v for k, v in changes.items() if v is not None})
