"""k-means over client hyperparameter vectors and per-cluster consolidation."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from fedload.hypertune import HyperParams
from fedload.nn import ParameterVector

MAX_ITER = 300
ZERO_INERTIA = 1e-12


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    k: int
    labels: dict[str, int]
    centroids: np.ndarray
    inertia: float

    def members(self, cluster: int) -> list[str]:
        return sorted(c for c, lab in self.labels.items() if lab == cluster)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "labels": dict(sorted(self.labels.items())),
            "centroids": self.centroids.tolist(),
            "inertia": self.inertia,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ClusterAssignment:
        return cls(int(d["k"]), {c: int(v) for c, v in d["labels"].items()}, np.array(d["centroids"]), float(d["inertia"]))


@dataclass(frozen=True)
class ClusterModel:
    index: int
    members: tuple[str, ...]
    hyperparams: HyperParams
    weights: ParameterVector | None = None


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _centroids(x: np.ndarray, labels: np.ndarray, k: int, centroids: np.ndarray) -> np.ndarray:
    """Cluster means; an empty cluster takes the point farthest from its centroid."""
    labels = labels.copy()
    for j in range(k):
        if np.any(labels == j):
            continue
        d2 = ((x - centroids[labels]) ** 2).sum(axis=1)
        sizes = np.bincount(labels, minlength=k)
        d2[sizes[labels] <= 1] = -1.0
        far = int(np.argmax(d2))
        labels[far] = j
    return np.stack([x[labels == j].mean(axis=0) for j in range(k)]), labels


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
    centroids = _plus_plus(x, k, rng)
    labels = np.argmin(_sq_dists(x, centroids), axis=1)
    for _ in range(MAX_ITER):
        centroids, labels = _centroids(x, labels, k, centroids)
        new = np.argmin(_sq_dists(x, centroids), axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
    centroids, labels = _centroids(x, labels, k, centroids)
    inertia = float(((x - centroids[labels]) ** 2).sum())
    return labels, centroids, inertia


def kmeans(vectors: Mapping[str, np.ndarray], k: int, seed: int = 0, restarts: int = 10) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding, best of ``restarts`` by inertia.

    Clients are processed in sorted id order and clusters are numbered by
    first appearance in that order, so the result does not depend on the
    mapping's iteration order.
    """
    ids = sorted(vectors)
    if k < 1 or k > len(ids):
        raise ValueError(f"k={k} must lie in [1, {len(ids)}]")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    x = np.stack([np.asarray(vectors[c], dtype=np.float64) for c in ids])
    best = None
    for r in range(restarts):
        result = _lloyd(x, k, np.random.default_rng([seed, r]))
        if best is None or result[2] < best[2]:
            best = result
    labels, centroids, inertia = best
    order = list(dict.fromkeys(labels.tolist()))
    remap = {old: new for new, old in enumerate(order)}
    return ClusterAssignment(
        k=k,
        labels={c: remap[int(lab)] for c, lab in zip(ids, labels)},
        centroids=centroids[order],
        inertia=inertia,
    )


def recompute_inertia(assignment: ClusterAssignment, vectors: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for c, lab in assignment.labels.items():
        total += float(((np.asarray(vectors[c]) - assignment.centroids[lab]) ** 2).sum())
    return total


def inertia_curve(
    vectors: Mapping[str, np.ndarray], k_range: Sequence[int], seed: int = 0, restarts: int = 10
) -> list[tuple[int, float]]:
    ks = list(k_range)
    if not ks:
        raise ValueError("empty k range")
    return [(k, kmeans(vectors, k, seed, restarts).inertia) for k in ks]


def elbow_select(curve: Sequence[tuple[int, float]], drop_threshold: float = 0.15) -> int:
    """Smallest k whose relative inertia drop to the next k is below the threshold.

    An inertia that is zero up to rounding (relative to the curve's largest
    value) counts as a zero drop. Falls back to the largest k.
    """
    if len(curve) < 2:
        raise ValueError("elbow selection needs at least two points")
    ks = [k for k, _ in curve]
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError(f"curve k values must be strictly increasing: {ks}")
    floor = ZERO_INERTIA * max(i for _, i in curve)
    for (k, cur), (_, nxt) in zip(curve, curve[1:]):
        drop = 0.0 if cur <= floor else (cur - nxt) / cur
        if drop < drop_threshold:
            return k
    return ks[-1]


def _mode(values: Sequence[int]) -> int:
    counts = Counter(values)
    top = max(counts.values())
    return min(v for v, n in counts.items() if n == top)


def modal_hyperparams(hps: Sequence[HyperParams]) -> HyperParams:
    """Per-field mode; ties go to the smallest value."""
    if not hps:
        raise ValueError("no hyperparameters to consolidate")
    return HyperParams(
        _mode([h.fc1_neurons for h in hps]),
        _mode([h.fc2_neurons for h in hps]),
        _mode([h.epochs for h in hps]),
    )


def consolidate_hyperparams(
    assignment: ClusterAssignment, tuned: Mapping[str, HyperParams]
) -> dict[int, HyperParams]:
    missing = sorted(set(assignment.labels) - set(tuned))
    if missing:
        raise KeyError(f"no tuning record for clients {missing}")
    return {j: modal_hyperparams([tuned[c] for c in assignment.members(j)]) for j in range(assignment.k)}


def save_curve_csv(curve: Sequence[tuple[int, float]], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k", "inertia"])
        for k, inertia in curve:
            writer.writerow([k, repr(float(inertia))])


def save_assignment(assignment: ClusterAssignment, path: str | Path, extra: dict | None = None) -> None:
    payload = dict(extra or {})
    payload["assignment"] = assignment.to_dict()
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
