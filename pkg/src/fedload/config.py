"""Experiment configuration, hashing and seed fan-out."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from fedload.data import Archetype, FleetSpec
from fedload.federated import FederationConfig
from fedload.hypertune import HyperGrid
from fedload.nn import AdamConfig, NetworkSpec

OUTPUT_ENV = "FEDLOAD_OUTPUT_DIR"
# excluded from the hash: they change where and how fast, not what
_UNHASHED = ("output_dir", "workers")


class ConfigError(ValueError):
    pass


def derive_seed(master: int, *parts: Any) -> int:
    """Deterministic 32-bit child seed: sha256 over ``master|part|part...``."""
    text = "|".join([str(int(master)), *(str(p) for p in parts)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


def reference_fleet(hours: int = 24 * 7 * 8, seed: int = 0) -> FleetSpec:
    """Five household archetypes with 11, 9, 15, 17 and 23 clients (75 in total)."""
    return FleetSpec(
        archetypes=(
            Archetype(0.25, 0.9, 19, 0.8, 0.08, 11, 0.2),
            Archetype(0.6, 2.2, 18, 1.2, 0.25, 9, 0.2),
            Archetype(0.8, 1.2, 8, 0.6, 0.15, 15, 0.2),
            Archetype(0.4, 2.8, 21, 1.0, 0.3, 17, 0.2),
            Archetype(0.35, 0.8, 13, 0.5, 0.05, 23, 0.2),
        ),
        hours=hours,
        seed=seed,
    )


@dataclass(frozen=True)
class ExperimentConfig:
    csv_path: str | None = None
    fleet: FleetSpec | None = field(default_factory=reference_fleet)
    lookback: int = 24
    train_fraction: float = 0.75
    grid: HyperGrid = field(default_factory=HyperGrid)
    fast_tuning: bool = False
    # fixed number of clusters; None selects k from the inertia elbow
    k: int | None = 5
    elbow_threshold: float = 0.15
    k_max: int = 10
    restarts: int = 10
    # None trains each cluster for ceil(epochs / local_epochs) rounds on its own epoch budget
    rounds: int | None = None
    local_epochs: int = 5
    removal_factor: float = 1.6
    removal_lag: int = 20
    remove_deterrents: bool = True
    lstm_hidden: int = 20
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    schemes: tuple[str, ...] = ("federated", "centralized", "local")
    centralized_scope: str = "cluster"
    centralized_alp: str = "aggregate"
    ablation: bool = False
    ablation_rounds: int | None = None
    probe_client: str | None = None
    traces: bool = False
    output_dir: str = "runs/default"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "schemes", tuple(self.schemes))
        if (self.csv_path is None) == (self.fleet is None):
            raise ConfigError("set exactly one of csv_path and fleet")
        if self.lookback < 1:
            raise ConfigError("lookback must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.k_max < 2 and self.k is None:
            raise ConfigError("elbow selection needs k_max >= 2")
        if self.restarts < 1 or self.local_epochs < 1 or self.workers < 1:
            raise ConfigError("restarts, local_epochs and workers must be >= 1")
        if self.rounds is not None and self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.removal_factor <= 1 or self.removal_lag < 1:
            raise ConfigError("removal factor must exceed 1 and lag must be >= 1")
        unknown = set(self.schemes) - {"federated", "centralized", "local"}
        if unknown:
            raise ConfigError(f"unknown schemes {sorted(unknown)}")
        if self.centralized_scope not in ("cluster", "fleet"):
            raise ConfigError("centralized_scope must be 'cluster' or 'fleet'")
        if self.centralized_alp not in ("aggregate", "sum"):
            raise ConfigError("centralized_alp must be 'aggregate' or 'sum'")

    @property
    def base_spec(self) -> NetworkSpec:
        return NetworkSpec(input_size=1, lstm_hidden=self.lstm_hidden)

    def federation(self, epochs: int | None = None, rounds: int | None = None, cluster_seed: int = 0) -> FederationConfig:
        common = dict(
            local_epochs=self.local_epochs,
            removal_factor=self.removal_factor,
            removal_lag=self.removal_lag,
            remove_deterrents=self.remove_deterrents,
            seed=cluster_seed,
        )
        rounds = rounds if rounds is not None else self.rounds
        if rounds is not None:
            return FederationConfig(rounds=rounds, **common)
        if epochs is None:
            raise ConfigError("need either rounds or an epoch budget")
        return FederationConfig.for_budget(epochs, **common)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schemes"] = list(self.schemes)
        if self.fleet is not None:
            d["fleet"] = {
                "archetypes": [asdict(a) for a in self.fleet.archetypes],
                "hours": self.fleet.hours,
                "seed": self.fleet.seed,
            }
        d["grid"] = {"fc1": list(self.grid.fc1), "fc2": list(self.grid.fc2), "epochs": list(self.grid.epochs)}
        return d

    def hash(self) -> str:
        d = self.to_dict()
        for key in _UNHASHED:
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "fleet" in d and d["fleet"] is not None and not isinstance(d["fleet"], FleetSpec):
                fl = dict(d["fleet"])
                fl["archetypes"] = tuple(Archetype(**a) for a in fl["archetypes"])
                d["fleet"] = FleetSpec(**fl)
            if d.get("csv_path") is not None and "fleet" not in d:
                d["fleet"] = None
            if "grid" in d and not isinstance(d["grid"], HyperGrid):
                d["grid"] = HyperGrid(**{k: tuple(v) for k, v in d["grid"].items()})
            if "optimizer" in d and not isinstance(d["optimizer"], AdamConfig):
                d["optimizer"] = AdamConfig(**d["optimizer"])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def save(self, path: str | Path) -> None:
        payload = self.to_dict()
        payload.pop("workers")
        payload["config_hash"] = self.hash()
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def with_overrides(self, **overrides) -> ExperimentConfig:
        if not overrides:
            return self
        d = self.to_dict()
        if "csv_path" in overrides and overrides["csv_path"] is not None:
            d["fleet"] = None
        if "hours" in overrides:
            if self.fleet is None:
                raise ConfigError("hours only applies to a synthetic fleet")
            d["fleet"]["hours"] = overrides.pop("hours")
        for name in ("lr", "batch_size"):
            if name in overrides:
                d["optimizer"][name] = overrides.pop(name)
        for axis in ("fc1", "fc2", "epochs"):
            if axis in overrides:
                d["grid"][axis] = list(overrides.pop(axis))
        d.update(overrides)
        return ExperimentConfig.from_dict(d)

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)


