"""Per-client grid search over dense-layer widths and training epochs."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from fedload.data import WindowedDataset, split
from fedload.nn import AdamConfig, NetworkSpec, init_forecaster, mse_loss, predict, train

FAST_EPOCH_CAP = 150
MIN_TUNING_WINDOWS = 8


@dataclass(frozen=True, order=True)
class HyperParams:
    fc1_neurons: int
    fc2_neurons: int
    epochs: int

    def __post_init__(self):
        if min(self.fc1_neurons, self.fc2_neurons, self.epochs) < 1:
            raise ValueError(f"hyperparameters must be >= 1: {self}")

    def network(self, base: NetworkSpec) -> NetworkSpec:
        return replace(base, fc1_neurons=self.fc1_neurons, fc2_neurons=self.fc2_neurons)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.fc1_neurons, self.fc2_neurons, self.epochs)


@dataclass(frozen=True)
class HyperGrid:
    fc1: tuple[int, ...] = (32, 44, 56, 68)
    fc2: tuple[int, ...] = (85, 127, 198)
    epochs: tuple[int, ...] = (103, 148, 247, 291)

    def __post_init__(self):
        for name in ("fc1", "fc2", "epochs"):
            values = tuple(int(v) for v in getattr(self, name))
            object.__setattr__(self, name, values)
            if not values:
                raise ValueError(f"grid axis {name} is empty")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ValueError(f"grid axis {name} must be strictly increasing: {values}")
            if values[0] < 1:
                raise ValueError(f"grid axis {name} must be positive")

    def points(self) -> list[HyperParams]:
        return [HyperParams(*p) for p in itertools.product(self.fc1, self.fc2, self.epochs)]

    def contains(self, hp: HyperParams) -> bool:
        return hp.fc1_neurons in self.fc1 and hp.fc2_neurons in self.fc2 and hp.epochs in self.epochs


# same call signature as evaluate_point
Trainer = Callable[..., float]


def search_epochs(hp: HyperParams, fast: bool) -> int:
    return min(hp.epochs, FAST_EPOCH_CAP) if fast else hp.epochs


def evaluate_point(
    fit: WindowedDataset,
    val: WindowedDataset,
    hp: HyperParams,
    base: NetworkSpec,
    seed: int,
    optimizer: AdamConfig | None = None,
    fast: bool = False,
) -> float:
    """Validation MSE of one grid point trained from scratch."""
    spec = hp.network(base)
    report = train(init_forecaster(spec, seed), spec, fit, search_epochs(hp, fast), optimizer, seed)
    return mse_loss(predict(report.weights, spec, val.inputs), val.targets)


def _score_width(
    fit: WindowedDataset,
    val: WindowedDataset,
    fc1: int,
    fc2: int,
    epoch_candidates: Sequence[int],
    base: NetworkSpec,
    seed: int,
    optimizer: AdamConfig | None,
    fast: bool,
) -> dict[int, float]:
    """Scores for every epochs candidate of one (fc1, fc2) from a single run.

    Training is resumed between checkpoints, which is bit-identical to
    training each epochs candidate from scratch with the same seed.
    """
    spec = replace(base, fc1_neurons=fc1, fc2_neurons=fc2)
    weights, state, done = init_forecaster(spec, seed), None, 0
    scores = {}
    for epochs in epoch_candidates:
        target = search_epochs(HyperParams(fc1, fc2, epochs), fast)
        if target > done:
            report = train(weights, spec, fit, target - done, optimizer, seed, state=state, epoch_offset=done)
            weights, state, done = report.weights, report.state, target
        scores[epochs] = mse_loss(predict(weights, spec, val.inputs), val.targets)
    return scores


def grid_search(
    dataset: WindowedDataset,
    grid: HyperGrid,
    base: NetworkSpec,
    seed: int,
    optimizer: AdamConfig | None = None,
    fast: bool = False,
    trainer: Trainer | None = None,
) -> tuple[HyperParams, float]:
    """Pick the grid point with the lowest validation MSE.

    The client's training windows are split 75/25 chronologically into a fit
    and a validation part. Ties go to the lexicographically smallest
    (fc1, fc2, epochs). ``trainer`` replaces the built-in scoring with a
    callable of :func:`evaluate_point`'s signature.
    """
    if len(dataset) < MIN_TUNING_WINDOWS:
        raise ValueError(f"grid search needs >= {MIN_TUNING_WINDOWS} windows, got {len(dataset)}")
    fit, val = split(dataset, 0.75)
    scores: dict[HyperParams, float] = {}
    if trainer is None:
        for fc1, fc2 in itertools.product(grid.fc1, grid.fc2):
            for epochs, score in _score_width(fit, val, fc1, fc2, grid.epochs, base, seed, optimizer, fast).items():
                scores[HyperParams(fc1, fc2, epochs)] = score
    else:
        for hp in grid.points():
            scores[hp] = float(trainer(fit, val, hp, base, seed, optimizer, fast))
    best = None
    for hp in sorted(scores):
        if best is None or scores[hp] < scores[best]:
            best = hp
    return best, scores[best]


def hyperparam_vector(hp: HyperParams, grid: HyperGrid) -> np.ndarray:
    """Min-max normalise each coordinate over the grid's range (single-value axes map to 0)."""
    if not grid.contains(hp):
        raise ValueError(f"{hp} is not on the grid")
    out = []
    for value, axis in zip(hp.as_tuple(), (grid.fc1, grid.fc2, grid.epochs)):
        lo, hi = axis[0], axis[-1]
        out.append(0.0 if hi == lo else (value - lo) / (hi - lo))
    return np.array(out)


@dataclass(frozen=True)
class TuningRecord:
    client_id: str
    fc1: int
    fc2: int
    epochs: int
    score: float

    @property
    def hyperparams(self) -> HyperParams:
        return HyperParams(self.fc1, self.fc2, self.epochs)


def save_tuning(records: Sequence[TuningRecord], path: str | Path, extra: dict | None = None) -> None:
    payload = dict(extra or {})
    payload["records"] = [asdict(r) for r in sorted(records, key=lambda r: r.client_id)]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_tuning(path: str | Path) -> list[TuningRecord]:
    payload = json.loads(Path(path).read_text())
    return [TuningRecord(**r) for r in payload["records"]]
