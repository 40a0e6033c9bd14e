"""Federated, centralized and local learning evaluated on individual and aggregate load."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from fedload.data import (
    AlignmentError,
    ClientData,
    LoadSeries,
    Scaler,
    WindowedDataset,
    aggregate,
    format_timestamp,
    prepare_client,
)
from fedload.hypertune import HyperParams
from fedload.nn import (
    AdamConfig,
    NetworkSpec,
    ParameterVector,
    ShapeError,
    TrainReport,
    init_forecaster,
    mse_loss,
    predict,
    train,
)

SCHEMES = ("federated", "centralized", "local")
SPLITS = ("test", "train")


def rmse(predicted, actual) -> float:
    return float(np.sqrt(mse_loss(predicted, actual)))


@dataclass(frozen=True, eq=False)
class TrainedModel:
    """Weights plus the scaler their inputs are expressed in.

    ``scaler=None`` means each client applies its own scaler, as federated
    clients do with the shared global model.
    """

    scheme: str
    spec: NetworkSpec
    weights: ParameterVector
    scaler: Scaler | None = None
    report: TrainReport | None = None


@dataclass(frozen=True, eq=False)
class SchemeResult:
    scheme: str
    task: str
    split: str
    client_id: str
    positions: np.ndarray
    timestamps: list
    predicted: np.ndarray
    actual: np.ndarray

    @property
    def rmse(self) -> float:
        return rmse(self.predicted, self.actual)


def _split_sets(client: ClientData, scaler: Scaler | None) -> dict[str, WindowedDataset]:
    if scaler is None or scaler == client.scaler:
        return {"train": client.train, "test": client.test}
    train_set, test_set = client.rescaled(scaler)
    return {"train": train_set, "test": test_set}


def predict_ilp(model: TrainedModel, client: ClientData, split: str = "test", task: str = "ILP") -> SchemeResult:
    """One-step-ahead predictions over a split, converted back to kWh."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if model.weights.manifest != model.spec.manifest():
        raise ShapeError("model weights do not match its spec")
    if model.spec.input_size != 1:
        raise ShapeError("load forecasters take univariate windows")
    scaler = model.scaler or client.scaler
    ds = _split_sets(client, model.scaler)[split]
    predicted = scaler.invert(predict(model.weights, model.spec, ds.inputs))
    stamps = client.series.timestamps()
    return SchemeResult(
        scheme=model.scheme,
        task=task,
        split=split,
        client_id=client.client_id,
        positions=ds.positions.copy(),
        timestamps=[stamps[i] for i in ds.positions],
        predicted=predicted,
        actual=client.series.values[ds.positions].copy(),
    )


def sum_predictions(scheme: str, parts: Sequence[SchemeResult], client_id: str = "aggregate") -> SchemeResult:
    """Aggregate prediction as the elementwise sum of per-client predictions."""
    if not parts:
        raise ValueError("no client predictions to sum")
    first = parts[0]
    for p in parts[1:]:
        if p.split != first.split or not np.array_equal(p.positions, first.positions):
            raise AlignmentError(f"predictions for {p.client_id} are not aligned with {first.client_id}")
    predicted = np.zeros_like(first.predicted)
    actual = np.zeros_like(first.actual)
    for p in parts:
        predicted = predicted + p.predicted
        actual = actual + p.actual
    return SchemeResult(scheme, "ALP", first.split, client_id, first.positions.copy(), list(first.timestamps), predicted, actual)


def predict_alp(
    scheme: str,
    clients: Sequence[ClientData],
    split: str = "test",
    models: Mapping[str, TrainedModel] | TrainedModel | None = None,
    aggregate_model: TrainedModel | None = None,
) -> SchemeResult:
    """Aggregate-load prediction for a group of aligned clients.

    With ``aggregate_model`` the model forecasts the summed series directly
    (its own windows and scaler). Otherwise each client is forecast with
    ``models[client_id]`` (or one shared model) and the results are summed.
    """
    aggregate([c.series for c in clients])  # alignment check
    if aggregate_model is not None:
        agg = aggregate_client(clients)
        result = predict_ilp(aggregate_model, agg, split, task="ALP")
        return SchemeResult(scheme, "ALP", split, agg.client_id, result.positions, result.timestamps, result.predicted, result.actual)
    if models is None:
        raise ValueError("predict_alp needs per-client models or an aggregate model")
    parts = []
    for c in clients:
        model = models if isinstance(models, TrainedModel) else models[c.client_id]
        parts.append(predict_ilp(model, c, split))
    return sum_predictions(scheme, parts)


def aggregate_client(clients: Sequence[ClientData]) -> ClientData:
    """The summed series of aligned clients, windowed on the same train/test boundary."""
    first = clients[0]
    return prepare_client(
        aggregate([c.series for c in clients]), first.train.lookback, n_train=len(first.train)
    )


def pooled_scaler(clients: Sequence[ClientData]) -> Scaler:
    return Scaler.fit(np.concatenate([c.series.values[: c.n_train_values] for c in clients]))


def train_centralized(
    clients: Sequence[ClientData],
    hp: HyperParams,
    base: NetworkSpec,
    seed: int,
    optimizer: AdamConfig | None = None,
    init_seed: int | None = None,
) -> TrainedModel:
    """One model on the union of all clients' training windows under a pooled scaler."""
    if not clients:
        raise ValueError("centralized training needs at least one client")
    scaler = pooled_scaler(clients)
    pooled = WindowedDataset.concat([_split_sets(c, scaler)["train"] for c in clients], scaler)
    spec = hp.network(base)
    weights = init_forecaster(spec, seed if init_seed is None else init_seed)
    report = train(weights, spec, pooled, hp.epochs, optimizer, seed)
    return TrainedModel("centralized", spec, report.weights, scaler, report)


def train_local(
    client: ClientData,
    hp: HyperParams,
    base: NetworkSpec,
    seed: int,
    optimizer: AdamConfig | None = None,
    init_seed: int | None = None,
    scheme: str = "local",
) -> TrainedModel:
    spec = hp.network(base)
    weights = init_forecaster(spec, seed if init_seed is None else init_seed)
    report = train(weights, spec, client.train, hp.epochs, optimizer, seed)
    return TrainedModel(scheme, spec, report.weights, client.scaler, report)


@dataclass(frozen=True)
class ClusterReport:
    cluster: int
    n_clients: int
    # ilp[split][scheme] = {"min", "max", "mean"}; alp[split][scheme] = rmse
    ilp: dict
    alp: dict
    max_client_kwh: float
    mean_client_kwh: float
    max_aggregate_kwh: float
    mean_aggregate_kwh: float

    def to_dict(self) -> dict:
        return {
            "cluster": self.cluster,
            "n_clients": self.n_clients,
            "rmse_ilp": self.ilp,
            "rmse_alp": self.alp,
            "max_client_energy_consumption": self.max_client_kwh,
            "mean_client_energy_consumption": self.mean_client_kwh,
            "max_aggregate_energy_consumption": self.max_aggregate_kwh,
            "mean_aggregate_energy_consumption": self.mean_aggregate_kwh,
        }

    def rows(self) -> list[list]:
        """Rows in the layout of the per-cluster prediction tables."""
        label = {"test": "Test Dataset", "train": "Train Dataset"}
        out = []
        for split in SPLITS:
            for stat in ("min", "max", "mean"):
                out.append([label[split], "RMSE (ILP)", stat.capitalize(), *(self.ilp[split][s][stat] for s in SCHEMES)])
            out.append([label[split], "RMSE (ALP)", "-", *(self.alp[split][s] for s in SCHEMES)])
        out.append(["Max client energy consumption", "", "", self.max_client_kwh, "", ""])
        out.append(["Mean client energy consumption", "", "", self.mean_client_kwh, "", ""])
        out.append(["Max aggregate energy consumption", "", "", self.max_aggregate_kwh, "", ""])
        out.append(["Mean aggregate energy consumption", "", "", self.mean_aggregate_kwh, "", ""])
        return out


def build_report(
    cluster: int,
    ilp: Mapping[tuple[str, str], Sequence[SchemeResult]],
    alp: Mapping[tuple[str, str], SchemeResult],
    fleet: Sequence[LoadSeries],
) -> ClusterReport:
    """Fold per-client ILP and per-cluster ALP results into one table.

    ``ilp`` and ``alp`` are keyed by (scheme, split).
    """
    ilp_table: dict = {}
    alp_table: dict = {}
    for split in SPLITS:
        ilp_table[split], alp_table[split] = {}, {}
        for scheme in SCHEMES:
            if (scheme, split) not in ilp or (scheme, split) not in alp:
                raise KeyError(f"missing {scheme} results for the {split} split")
            errors = [r.rmse for r in ilp[(scheme, split)]]
            if not errors:
                raise ValueError(f"no client results for {scheme}/{split}")
            ilp_table[split][scheme] = {
                "min": float(min(errors)),
                "max": float(max(errors)),
                "mean": float(np.mean(errors)),
            }
            alp_table[split][scheme] = alp[(scheme, split)].rmse
    values = np.concatenate([s.values for s in fleet])
    agg = aggregate(list(fleet)).values
    return ClusterReport(
        cluster=cluster,
        n_clients=len(fleet),
        ilp=ilp_table,
        alp=alp_table,
        max_client_kwh=float(values.max()),
        mean_client_kwh=float(values.mean()),
        max_aggregate_kwh=float(agg.max()),
        mean_aggregate_kwh=float(agg.mean()),
    )


REPORT_HEADER = ["dataset", "metric", "stat", *SCHEMES]


def write_reports(reports: Sequence[ClusterReport], json_path: Path, csv_path: Path, meta: dict | None = None) -> None:
    payload = dict(meta or {})
    payload["clusters"] = [r.to_dict() for r in reports]
    Path(json_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with Path(csv_path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for key, value in sorted((meta or {}).items()):
            if isinstance(value, str):
                fh.write(f"# {key}: {value}\n")
        writer.writerow(["cluster", *REPORT_HEADER])
        for r in reports:
            for row in r.rows():
                writer.writerow([r.cluster, *(repr(v) if isinstance(v, float) else v for v in row)])


def write_trace(results: Sequence[SchemeResult], path: Path) -> None:
    """timestamp, actual kWh, then one predicted column per scheme."""
    first = results[0]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "actual_kwh", *(f"{r.scheme}_kwh" for r in results)])
        for i, ts in enumerate(first.timestamps):
            writer.writerow([format_timestamp(ts), repr(float(first.actual[i])), *(repr(float(r.predicted[i])) for r in results)])
