"""Clustered federated training: broadcast, local rounds, deterrent removal, FedAvg."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, Iterable, Sequence

import numpy as np

from fedload.clustering import ClusterModel
from fedload.data import Scaler, WindowedDataset
from fedload.nn import AdamConfig, AdamState, NetworkSpec, ParameterVector, ShapeError, init_forecaster, train
from fedload.parallel import worker_map

log = logging.getLogger(__name__)


class FederationError(RuntimeError):
    def __init__(self, message: str, logs: Sequence[RoundLog] = ()):
        super().__init__(message)
        self.logs = list(logs)


@dataclass
class ClientState:
    """Server-side view of one participating client.

    ``perturb`` (if set) is called as ``perturb(train, round)`` before each
    local round and returns the dataset the client actually trains on; it is
    how misbehaving clients are simulated.
    """

    client_id: str
    train: WindowedDataset
    test: WindowedDataset
    scaler: Scaler
    seed: int = 0
    loss_history: list[float] = field(default_factory=list)
    active: bool = True
    optimizer_state: AdamState | None = None
    epochs_done: int = 0
    perturb: Callable[[WindowedDataset, int], WindowedDataset] | None = None

    @classmethod
    def from_data(cls, data, seed: int = 0, perturb=None) -> ClientState:
        return cls(data.client_id, data.train, data.test, data.scaler, seed=seed, perturb=perturb)


@dataclass(frozen=True, eq=False)
class WeightUpdate:
    client_id: str
    weights: ParameterVector
    n_samples: int
    loss: float
    optimizer_state: AdamState | None = field(default=None, repr=False)
    epochs: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"{self.client_id}: update must cover at least one sample")


@dataclass(frozen=True)
class FederationConfig:
    rounds: int
    local_epochs: int = 5
    removal_factor: float = 1.6
    removal_lag: int = 20
    seed: int = 0
    remove_deterrents: bool = True
    # when set, the final round trains only the epochs left in this budget
    epoch_budget: int | None = None

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1:
            raise ValueError("rounds and local_epochs must be >= 1")
        if not self.removal_factor > 1:
            raise ValueError("removal factor must exceed 1")
        if self.removal_lag < 1:
            raise ValueError("removal lag must be >= 1")
        if self.epoch_budget is not None and not (
            (self.rounds - 1) * self.local_epochs < self.epoch_budget <= self.rounds * self.local_epochs
        ):
            raise ValueError(f"epoch budget {self.epoch_budget} does not fit {self.rounds} rounds of {self.local_epochs}")

    @classmethod
    def for_budget(cls, epochs: int, local_epochs: int = 5, **kwargs) -> FederationConfig:
        """T = ceil(epochs / E) rounds whose local epochs add up to ``epochs``."""
        return cls(rounds=math.ceil(epochs / local_epochs), local_epochs=local_epochs, epoch_budget=epochs, **kwargs)

    def epochs_in_round(self, t: int) -> int:
        if self.epoch_budget is None:
            return self.local_epochs
        return min(self.local_epochs, self.epoch_budget - (t - 1) * self.local_epochs)


@dataclass(frozen=True, eq=False)
class RoundLog:
    cluster: int
    round: int
    losses: dict[str, float]
    removed: list[str]
    checksum: str
    n_total: int
    participants: list[str]
    error: str | None = None
    updates: list[WeightUpdate] | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {
            "cluster": self.cluster,
            "round": self.round,
            "losses": dict(sorted(self.losses.items())),
            "removed": sorted(self.removed),
            "checksum": self.checksum,
            "n_total": self.n_total,
            "participants": sorted(self.participants),
        }
        if self.error is not None:
            out["error"] = self.error
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def fedavg_coefficients(updates: Sequence[WeightUpdate]) -> np.ndarray:
    n = sum(u.n_samples for u in updates)
    return np.array([u.n_samples / n for u in updates])


def fedavg(updates: Iterable[WeightUpdate]) -> ParameterVector:
    """Sample-weighted mean of client weights, sum(n_c / n * w_c).

    Updates are combined in ascending client_id order, and accumulated as
    offsets from the first client's weights so that identical inputs return
    exactly that vector.
    """
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise ValueError("fedavg needs at least one update")
    manifest = updates[0].weights.manifest
    for u in updates:
        if u.weights.manifest != manifest:
            raise ShapeError(f"update from {u.client_id} has a different manifest")
        if not np.all(np.isfinite(u.weights.values)):
            raise ValueError(f"update from {u.client_id} has non-finite weights")
    base = updates[0].weights.values
    acc = np.zeros_like(base)
    for coef, u in zip(fedavg_coefficients(updates), updates):
        acc += coef * (u.weights.values - base)
    return ParameterVector(base + acc, manifest)


def local_round(
    client: ClientState,
    global_weights: ParameterVector,
    spec: NetworkSpec,
    epochs: int,
    seed: int | None = None,
    round_index: int = 1,
    optimizer: AdamConfig | None = None,
) -> WeightUpdate:
    """Load the broadcast weights, train ``epochs`` local epochs and report back.

    The client keeps its Adam moments and epoch counter across rounds, so a
    single-client federation is the same computation as plain local training.
    """
    if not client.active:
        raise ValueError(f"client {client.client_id} has been removed")
    data = client.train if client.perturb is None else client.perturb(client.train, round_index)
    report = train(
        global_weights,
        spec,
        data,
        epochs,
        optimizer,
        seed=client.seed if seed is None else seed,
        state=client.optimizer_state,
        epoch_offset=client.epochs_done,
    )
    return WeightUpdate(
        client_id=client.client_id,
        weights=report.weights,
        n_samples=report.n_samples,
        loss=float(report.losses[-1]),
        optimizer_state=report.state,
        epochs=epochs,
    )


def detect_deterrents(
    clients: Iterable[ClientState], t: int, factor: float = 1.6, lag: int = 20
) -> set[str]:
    """Active clients whose round-t loss exceeds ``factor`` times their loss ``lag`` rounds earlier.

    Loss histories hold one entry per round starting at round 1, so nothing
    is flagged before round lag + 1.
    """
    flagged = set()
    if t - lag < 1:
        return flagged
    for c in clients:
        if not c.active or len(c.loss_history) < t:
            continue
        if c.loss_history[t - 1] > factor * c.loss_history[t - lag - 1]:
            flagged.add(c.client_id)
    return flagged


def _round_task(client: ClientState, weights: ParameterVector, spec: NetworkSpec, epochs: int, t: int, optimizer):
    return local_round(client, weights, spec, epochs, round_index=t, optimizer=optimizer)


def run_federation(
    cluster: ClusterModel,
    clients: Sequence[ClientState],
    config: FederationConfig,
    spec: NetworkSpec,
    optimizer: AdamConfig | None = None,
    workers: int = 1,
    keep_updates: bool = False,
) -> tuple[ParameterVector, list[RoundLog]]:
    """Train one cluster's global model for ``config.rounds`` rounds.

    Input client states are not modified. Raises :class:`FederationError`
    (carrying the logs so far) if every client is removed or the updates
    stop agreeing on the weight layout.
    """
    if not clients:
        raise ValueError(f"cluster {cluster.index} has no clients")
    states = sorted(
        (replace(c, loss_history=list(c.loss_history)) for c in clients), key=lambda c: c.client_id
    )
    weights = cluster.weights
    if weights is None:
        weights = init_forecaster(spec, config.seed + cluster.index)
    if weights.manifest != spec.manifest():
        raise ShapeError("cluster weights do not match the cluster network spec")
    logs: list[RoundLog] = []
    with worker_map(workers) as pmap:
        for t in range(1, config.rounds + 1):
            active = [c for c in states if c.active]
            task = partial(
                _round_task, weights=weights, spec=spec, epochs=config.epochs_in_round(t), t=t, optimizer=optimizer
            )
            updates = list(pmap(task, active))
            for c, u in zip(active, updates):
                c.loss_history.append(u.loss)
                c.optimizer_state = u.optimizer_state
                c.epochs_done += u.epochs
            flagged = set()
            if config.remove_deterrents:
                flagged = detect_deterrents(active, t, config.removal_factor, config.removal_lag)
            for c in active:
                if c.client_id in flagged:
                    c.active = False
                    log.info("cluster %d round %d: removed deterrent client %s", cluster.index, t, c.client_id)
            kept = [u for u in updates if u.client_id not in flagged]
            losses = {u.client_id: u.loss for u in updates}
            if not kept:
                logs.append(RoundLog(cluster.index, t, losses, sorted(flagged), "", 0, [], error="all clients removed"))
                raise FederationError(f"cluster {cluster.index}: all clients removed at round {t}", logs)
            try:
                weights = fedavg(kept)
            except ShapeError as exc:
                logs.append(RoundLog(cluster.index, t, losses, sorted(flagged), "", 0, [], error=str(exc)))
                raise FederationError(f"cluster {cluster.index}: {exc}", logs) from exc
            logs.append(
                RoundLog(
                    cluster=cluster.index,
                    round=t,
                    losses=losses,
                    removed=sorted(flagged),
                    checksum=weights.checksum(),
                    n_total=sum(u.n_samples for u in kept),
                    participants=[u.client_id for u in kept],
                    updates=kept if keep_updates else None,
                )
            )
    return weights, logs
