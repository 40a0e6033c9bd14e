"""Load series: CSV ingestion, synthetic fleets, scaling, windows, splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

HOUR = timedelta(hours=1)
HOURS_PER_WEEK = 168
WEEKEND_START_HOUR = 120
# Monday 00:00 UTC; synthetic weeks are counted from here
SYNTH_EPOCH = datetime(2024, 1, 1, tzinfo=timezone.utc)


class CsvFormatError(ValueError):
    pass


class TimestampOrderError(CsvFormatError):
    pass


class GapError(CsvFormatError):
    pass


class NegativeLoadError(CsvFormatError):
    pass


class RaggedRowError(CsvFormatError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LoadSeries:
    """Hourly consumption of one client in kWh."""

    client_id: str
    start: datetime
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if not np.all(np.isfinite(values)):
            raise ValueError(f"{self.client_id}: non-finite load values")
        if np.any(values < 0):
            raise ValueError(f"{self.client_id}: negative load values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "start", _as_utc(self.start))

    def __len__(self) -> int:
        return self.values.size

    def timestamps(self) -> list[datetime]:
        return [self.start + i * HOUR for i in range(len(self))]


def _as_utc(ts: datetime) -> datetime:
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def _parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return _as_utc(datetime.fromisoformat(text))


def format_timestamp(ts: datetime) -> str:
    return _as_utc(ts).strftime("%Y-%m-%dT%H:%M:%SZ")


def ingest_csv(path: str | Path) -> list[LoadSeries]:
    """Read ``timestamp,<client>,<client>,...`` hourly CSV into series."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"load file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        if len(header) < 2 or header[0].strip().lower() != "timestamp":
            raise CsvFormatError(f"{path}: header must be 'timestamp,<client_id>,...'")
        clients = [h.strip() for h in header[1:]]
        if len(set(clients)) != len(clients):
            raise CsvFormatError(f"{path}: duplicated client id in header")
        stamps: list[datetime] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise RaggedRowError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            ts = _parse_timestamp(row[0])
            if stamps:
                if ts <= stamps[-1]:
                    raise TimestampOrderError(
                        f"{path}:{lineno}: timestamp {row[0]} is not after {format_timestamp(stamps[-1])}"
                    )
                if ts - stamps[-1] != HOUR:
                    raise GapError(f"{path}:{lineno}: gap before {row[0]}")
            vals = [float(v) for v in row[1:]]
            for client, v in zip(clients, vals):
                if v < 0 or not math.isfinite(v):
                    raise NegativeLoadError(f"{path}:{lineno}: client {client} has invalid load {v}")
            stamps.append(ts)
            rows.append(vals)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    table = np.array(rows)
    return [LoadSeries(c, stamps[0], table[:, j]) for j, c in enumerate(clients)]


def export_csv(fleet: Sequence[LoadSeries], path: str | Path, decimals: int = 6) -> None:
    _check_aligned(fleet)
    path = Path(path)
    stamps = fleet[0].timestamps()
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", *(s.client_id for s in fleet)])
        for i, ts in enumerate(stamps):
            writer.writerow([format_timestamp(ts), *(f"{s.values[i]:.{decimals}f}" for s in fleet)])


@dataclass(frozen=True)
class Archetype:
    base_load: float
    amplitude: float
    peak_hour: float
    weekend_factor: float = 1.0
    noise_std: float = 0.0
    n_clients: int = 1
    # sigma of a per-client lognormal size multiplier; 0 keeps every client identical up to noise
    size_spread: float = 0.0

    def __post_init__(self):
        for name in ("base_load", "amplitude", "weekend_factor", "noise_std", "n_clients", "size_spread"):
            if getattr(self, name) < 0:
                raise ValueError(f"archetype {name} must be >= 0")


@dataclass(frozen=True)
class FleetSpec:
    archetypes: tuple[Archetype, ...]
    hours: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "archetypes", tuple(self.archetypes))
        if not self.archetypes:
            raise ValueError("fleet needs at least one archetype")
        if self.hours < 1:
            raise ValueError("fleet series length must be >= 1 hour")
        if sum(a.n_clients for a in self.archetypes) < 1:
            raise ValueError("fleet has no clients")


def daily_bump(hours: np.ndarray, peak_hour: float) -> np.ndarray:
    return np.maximum(0.0, np.cos(2.0 * np.pi * (hours - peak_hour) / 24.0))


def synthesize_fleet(spec: FleetSpec) -> list[LoadSeries]:
    """Generate hourly series; client ids are ``a<archetype>_c<index>``.

    Each client draws from its own generator keyed on (seed, archetype,
    client), so adding clients to one archetype leaves the others unchanged.
    """
    t = np.arange(spec.hours)
    hour_of_day = t % 24
    weekend = (t % HOURS_PER_WEEK) >= WEEKEND_START_HOUR
    fleet = []
    for a_idx, arch in enumerate(spec.archetypes):
        bump = daily_bump(hour_of_day, arch.peak_hour)
        shape = np.where(weekend, arch.weekend_factor, 1.0) * bump
        for c_idx in range(arch.n_clients):
            rng = np.random.default_rng([spec.seed, a_idx, c_idx])
            size = rng.lognormal(0.0, arch.size_spread) if arch.size_spread > 0 else 1.0
            clean = size * (arch.base_load + arch.amplitude * shape)
            noise = rng.normal(0.0, arch.noise_std, spec.hours) if arch.noise_std > 0 else 0.0
            fleet.append(
                LoadSeries(f"a{a_idx}_c{c_idx:03d}", SYNTH_EPOCH, np.maximum(0.0, clean + size * noise))
            )
    return fleet


@dataclass(frozen=True)
class Scaler:
    """Min-max scaling to [0, 1] over the fitted range."""

    min: float
    max: float
    kind: str = "min-max"

    def __post_init__(self):
        if not self.max > self.min:
            raise ValueError("scaler needs max > min")

    @classmethod
    def fit(cls, values) -> Scaler:
        values = np.asarray(values, dtype=np.float64)
        lo, hi = float(values.min()), float(values.max())
        if hi - lo <= 1e-12 * max(1.0, abs(lo)):
            # flat series: unit span so scaled values stay finite
            hi = lo + 1.0
        return cls(lo, hi)

    @property
    def span(self) -> float:
        return self.max - self.min

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.min) / self.span

    def invert(self, x):
        return np.asarray(x, dtype=np.float64) * self.span + self.min

    def to_dict(self) -> dict:
        return {"kind": self.kind, "min": self.min, "max": self.max}


@dataclass(frozen=True, eq=False)
class WindowedDataset:
    """Scaled look-back windows and next-hour targets.

    ``positions[i]`` is the index in the source series of target ``i``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    lookback: int
    scaler: Scaler
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[1] != self.lookback:
            raise ValueError("inputs must be (n_windows, lookback)")
        if self.targets.shape != (self.inputs.shape[0],):
            raise ValueError("one target per window")
        if self.positions is None:
            object.__setattr__(self, "positions", np.arange(len(self.targets)) + self.lookback)

    def __len__(self) -> int:
        return self.targets.size

    def subset(self, index) -> WindowedDataset:
        return WindowedDataset(
            self.inputs[index], self.targets[index], self.lookback, self.scaler, self.positions[index]
        )

    def pairs(self) -> list[tuple[np.ndarray, float]]:
        return [(w, float(t)) for w, t in zip(self.inputs, self.targets)]

    @classmethod
    def concat(cls, parts: Sequence[WindowedDataset], scaler: Scaler | None = None) -> WindowedDataset:
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([p.inputs for p in parts]),
            np.concatenate([p.targets for p in parts]),
            parts[0].lookback,
            scaler or parts[0].scaler,
            np.concatenate([p.positions for p in parts]),
        )


def make_windows(series: LoadSeries, lookback: int, scaler: Scaler) -> WindowedDataset:
    if lookback < 1:
        raise ValueError("lookback must be >= 1")
    if len(series) <= lookback:
        raise ValueError(f"{series.client_id}: series of length {len(series)} too short for lookback {lookback}")
    scaled = scaler.apply(series.values)
    inputs = np.lib.stride_tricks.sliding_window_view(scaled[:-1], lookback).copy()
    return WindowedDataset(inputs, scaled[lookback:].copy(), lookback, scaler)


def split(dataset: WindowedDataset, train_fraction: float) -> tuple[WindowedDataset, WindowedDataset]:
    """Chronological split: the first floor(fraction * n) windows train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {train_fraction}")
    n_train = math.floor(train_fraction * len(dataset))
    if n_train < 1 or n_train >= len(dataset):
        raise ValueError(f"split of {len(dataset)} windows at {train_fraction} leaves an empty side")
    return dataset.subset(slice(0, n_train)), dataset.subset(slice(n_train, None))


def n_train_windows(n_values: int, lookback: int, train_fraction: float) -> int:
    return math.floor(train_fraction * (n_values - lookback))


@dataclass(frozen=True, eq=False)
class ClientData:
    """A client's series with its training-portion scaler and split windows."""

    series: LoadSeries
    scaler: Scaler
    train: WindowedDataset
    test: WindowedDataset

    @property
    def client_id(self) -> str:
        return self.series.client_id

    @property
    def n_train_values(self) -> int:
        """Raw hours touched by training windows (inputs and targets)."""
        return len(self.train) + self.train.lookback

    def rescaled(self, scaler: Scaler) -> tuple[WindowedDataset, WindowedDataset]:
        """Train/test windows of the same series under another scaler."""
        ds = make_windows(self.series, self.train.lookback, scaler)
        n = len(self.train)
        return ds.subset(slice(0, n)), ds.subset(slice(n, None))


def prepare_client(
    series: LoadSeries, lookback: int = 24, train_fraction: float = 0.75, n_train: int | None = None
) -> ClientData:
    """Window a series and fit its scaler on the training hours only.

    ``n_train`` pins the number of training windows instead of deriving it
    from ``train_fraction``.
    """
    if len(series) < lookback + 2:
        raise ValueError(f"{series.client_id}: need at least lookback + 2 = {lookback + 2} hours")
    n_windows = len(series) - lookback
    if n_train is None:
        n_train = n_train_windows(len(series), lookback, train_fraction)
    if not 1 <= n_train < n_windows:
        raise ValueError(f"{series.client_id}: cannot train on {n_train} of {n_windows} windows")
    scaler = Scaler.fit(series.values[: n_train + lookback])
    ds = make_windows(series, lookback, scaler)
    return ClientData(series, scaler, ds.subset(slice(0, n_train)), ds.subset(slice(n_train, None)))


def _check_aligned(fleet: Sequence[LoadSeries]) -> None:
    if not fleet:
        raise AlignmentError("empty fleet")
    first = fleet[0]
    for s in fleet[1:]:
        if s.start != first.start or len(s) != len(first):
            raise AlignmentError(f"series {s.client_id} is not aligned with {first.client_id}")


def aggregate(fleet: Sequence[LoadSeries], client_id: str = "aggregate") -> LoadSeries:
    _check_aligned(fleet)
    total = np.zeros(len(fleet[0]))
    for s in fleet:
        total = total + s.values
    return LoadSeries(client_id, fleet[0].start, total)
