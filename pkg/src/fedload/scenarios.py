"""Ready-made fleets and misbehaving-client models for experiments."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from fedload.data import Archetype, FleetSpec, WindowedDataset


@dataclass(frozen=True)
class RandomTargets:
    """Client perturbation that replaces every target with fresh noise each round.

    Targets are drawn from U(0, 1 + growth * round), so the client's loss
    keeps rising instead of converging. Picklable, so it also works with
    process-based client parallelism.
    """

    seed: int = 0
    growth: float = 0.05

    def __call__(self, dataset: WindowedDataset, round_index: int) -> WindowedDataset:
        rng = np.random.default_rng([self.seed, round_index])
        scale = 1.0 + self.growth * round_index
        return replace(dataset, targets=rng.uniform(0.0, scale, len(dataset)))


def homogeneous_fleet(n_clients: int = 5, hours: int = 24 * 7 * 6, seed: int = 0) -> FleetSpec:
    """One evening-peak household archetype with mild size differences."""
    return FleetSpec((Archetype(0.3, 1.5, 19, 0.6, 0.05, n_clients, 0.3),), hours, seed)


def two_archetype_fleet(n_clients: int = 20, hours: int = 24 * 7 * 2, seed: int = 0) -> FleetSpec:
    """Two household types with daily peaks 12 hours apart.

    Morning-peak homes are smooth and regular. Evening-peak homes have a
    strong weekend dip and noise large enough that their validation error
    bottoms out early, so tuning separates the two types by epoch count.
    Sizes vary by a lognormal factor.
    """
    half = n_clients // 2
    return FleetSpec(
        (
            Archetype(0.3, 1.2, 7, 1.0, 0.03, half, 0.5),
            Archetype(0.5, 2.5, 19, 0.4, 1.0, n_clients - half, 0.5),
        ),
        hours,
        seed,
    )
