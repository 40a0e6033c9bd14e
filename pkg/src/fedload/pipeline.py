"""Experiment stages and their on-disk artifacts.

Every stage reads its inputs from the output directory and writes its
results there, tagged with the config hash, so any stage can be re-run on
its own. Stage order: synth, tune, cluster, then federate / centralize /
localize, then report. ``ablate`` needs tune and cluster.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from functools import partial
from pathlib import Path
from typing import Callable

from fedload.clustering import (
    ClusterAssignment,
    ClusterModel,
    consolidate_hyperparams,
    elbow_select,
    inertia_curve,
    kmeans,
    modal_hyperparams,
    save_curve_csv,
)
from fedload.config import ConfigError, ExperimentConfig, derive_seed
from fedload.data import ClientData, LoadSeries, Scaler, export_csv, ingest_csv, prepare_client, synthesize_fleet
from fedload.federated import ClientState, FederationError, run_federation
from fedload.hypertune import HyperParams, TuningRecord, grid_search, hyperparam_vector
from fedload.nn import NetworkSpec, ParameterVector
from fedload.parallel import worker_map
from fedload.schemes import (
    SCHEMES,
    SPLITS,
    TrainedModel,
    aggregate_client,
    build_report,
    predict_alp,
    predict_ilp,
    sum_predictions,
    train_centralized,
    train_local,
    write_reports,
    write_trace,
)

log = logging.getLogger(__name__)

STAGES = ("synth", "tune", "cluster", "federate", "centralize", "localize", "report", "ablate")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: str):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


# seed fan-out; every consumer goes through these so matched runs share seeds
def tune_seed(cfg: ExperimentConfig, client_id: str) -> int:
    return derive_seed(cfg.seed, "tune", client_id)


def client_seed(cfg: ExperimentConfig, client_id: str) -> int:
    return derive_seed(cfg.seed, "client", client_id)


def init_base(cfg: ExperimentConfig) -> int:
    """Cluster j initialises its model from seed ``init_base + j`` in every scheme."""
    return derive_seed(cfg.seed, "init")


def kmeans_seed(cfg: ExperimentConfig) -> int:
    return derive_seed(cfg.seed, "kmeans")


def centralized_seed(cfg: ExperimentConfig, cluster: int | str) -> int:
    return derive_seed(cfg.seed, "centralized", cluster)


@dataclass(frozen=True)
class Run:
    """A config bound to its output directory."""

    config: ExperimentConfig
    root: Path

    @classmethod
    def create(cls, config: ExperimentConfig) -> Run:
        root = config.resolved_output_dir()
        root.mkdir(parents=True, exist_ok=True)
        config.save(root / "config.json")
        return cls(config, root)

    @property
    def hash(self) -> str:
        return self.config.hash()

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, name: str, payload: dict) -> Path:
        payload = {"config_hash": self.hash, **payload}
        p = self.path(name)
        p.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return p

    def read_json(self, name: str, stage: str) -> dict:
        p = self.root / name
        if not p.exists():
            raise StageError(stage, f"missing artifact {name}; run its producing stage first")
        payload = json.loads(p.read_text())
        self.check_hash(payload.get("config_hash"), name, stage)
        return payload

    def check_hash(self, found: str | None, name: str, stage: str) -> None:
        if found != self.hash:
            raise StageError(stage, f"{name} was produced by config {found}, expected {self.hash}")

    def save_weights(self, name: str, weights: ParameterVector, **meta) -> None:
        weights.save(self.path(name), {"config_hash": self.hash, **meta})

    def load_weights(self, name: str, stage: str) -> ParameterVector:
        p = self.root / name
        if not p.exists():
            raise StageError(stage, f"missing checkpoint {name}")
        self.check_hash(ParameterVector.read_meta(p).get("config_hash"), name, stage)
        return ParameterVector.load(p)


# ---------------------------------------------------------------- synth


def stage_synth(run: Run) -> list[LoadSeries]:
    cfg = run.config
    if cfg.csv_path is not None:
        fleet = ingest_csv(cfg.csv_path)
        source = {"csv": str(cfg.csv_path)}
    else:
        fleet = synthesize_fleet(cfg.fleet)
        source = {"synthetic": True}
    export_csv(fleet, run.path("fleet.csv"))
    run.write_json(
        "fleet.json",
        {"source": source, "clients": [s.client_id for s in fleet], "hours": len(fleet[0].values) if fleet else 0},
    )
    return fleet


def load_fleet(run: Run, stage: str) -> list[LoadSeries]:
    meta = run.read_json("fleet.json", stage)
    fleet = ingest_csv(run.root / "fleet.csv")
    if [s.client_id for s in fleet] != meta["clients"]:
        raise StageError(stage, "fleet.csv does not match fleet.json")
    return fleet


def load_clients(run: Run, stage: str) -> dict[str, ClientData]:
    cfg = run.config
    try:
        return {
            s.client_id: prepare_client(s, cfg.lookback, cfg.train_fraction) for s in load_fleet(run, stage)
        }
    except ValueError as exc:
        raise StageError(stage, str(exc)) from exc


# ---------------------------------------------------------------- tune


def _tune_one(client: ClientData, cfg: ExperimentConfig) -> TuningRecord:
    hp, score = grid_search(
        client.train, cfg.grid, cfg.base_spec, tune_seed(cfg, client.client_id), cfg.optimizer, cfg.fast_tuning
    )
    return TuningRecord(client.client_id, hp.fc1_neurons, hp.fc2_neurons, hp.epochs, score)


def stage_tune(run: Run) -> list[TuningRecord]:
    clients = load_clients(run, "tune")
    with worker_map(run.config.workers) as pmap:
        records = list(pmap(partial(_tune_one, cfg=run.config), [clients[c] for c in sorted(clients)]))
    for r in records:
        log.info("tuned %s -> (%d, %d, %d) val mse %.5f", r.client_id, r.fc1, r.fc2, r.epochs, r.score)
    run.write_json(
        "tuning.json",
        {"fast": run.config.fast_tuning, "records": [asdict(r) for r in records]},
    )
    return records


def load_tuned(run: Run, stage: str) -> dict[str, HyperParams]:
    payload = run.read_json("tuning.json", stage)
    return {r["client_id"]: TuningRecord(**r).hyperparams for r in payload["records"]}


# ---------------------------------------------------------------- cluster


@dataclass(frozen=True)
class Clustering:
    assignment: ClusterAssignment
    hyperparams: dict[int, HyperParams]
    fleet_hyperparams: HyperParams

    def models(self) -> list[ClusterModel]:
        return [
            ClusterModel(j, tuple(self.assignment.members(j)), self.hyperparams[j]) for j in range(self.assignment.k)
        ]


def stage_cluster(run: Run) -> Clustering:
    cfg = run.config
    tuned = load_tuned(run, "cluster")
    vectors = {c: hyperparam_vector(hp, cfg.grid) for c, hp in tuned.items()}
    curve = None
    if cfg.k is None:
        curve = inertia_curve(vectors, range(1, min(cfg.k_max, len(vectors)) + 1), kmeans_seed(cfg), cfg.restarts)
        if len(curve) < 2:
            raise ConfigError("elbow selection needs at least two clients")
        k = elbow_select(curve, cfg.elbow_threshold)
        save_curve_csv(curve, run.path("inertia.csv"))
        log.info("elbow selected k=%d", k)
    else:
        k = cfg.k
        if k > len(vectors):
            raise ConfigError(f"k={k} exceeds the number of clients ({len(vectors)})")
    assignment = kmeans(vectors, k, kmeans_seed(cfg), cfg.restarts)
    hps = consolidate_hyperparams(assignment, tuned)
    fleet_hp = modal_hyperparams(list(tuned.values()))
    run.write_json(
        "clusters.json",
        {
            "mode": "elbow" if curve is not None else "fixed",
            "inertia_curve": [[kk, v] for kk, v in curve] if curve else None,
            "assignment": assignment.to_dict(),
            "hyperparams": {str(j): list(hp.as_tuple()) for j, hp in hps.items()},
            "fleet_hyperparams": list(fleet_hp.as_tuple()),
        },
    )
    return Clustering(assignment, hps, fleet_hp)


def load_clustering(run: Run, stage: str) -> Clustering:
    payload = run.read_json("clusters.json", stage)
    return Clustering(
        ClusterAssignment.from_dict(payload["assignment"]),
        {int(j): HyperParams(*v) for j, v in payload["hyperparams"].items()},
        HyperParams(*payload["fleet_hyperparams"]),
    )


# ---------------------------------------------------------------- train


def _client_states(cfg: ExperimentConfig, clients: dict[str, ClientData], ids) -> list[ClientState]:
    return [ClientState.from_data(clients[c], seed=client_seed(cfg, c)) for c in ids]


def stage_federate(run: Run) -> dict[int, ParameterVector]:
    cfg = run.config
    clients = load_clients(run, "federate")
    clustering = load_clustering(run, "federate")
    out = {}
    lines = []
    try:
        for cluster in clustering.models():
            fcfg = cfg.federation(epochs=cluster.hyperparams.epochs, cluster_seed=init_base(cfg))
            spec = cluster.hyperparams.network(cfg.base_spec)
            try:
                weights, logs = run_federation(
                    cluster, _client_states(cfg, clients, cluster.members), fcfg, spec, cfg.optimizer, cfg.workers
                )
            except FederationError as exc:
                lines += [{"config_hash": run.hash, **entry.to_dict()} for entry in exc.logs]
                raise StageError("federate", str(exc)) from exc
            lines += [{"config_hash": run.hash, **entry.to_dict()} for entry in logs]
            run.save_weights(f"federated/cluster_{cluster.index}.pvec", weights, cluster=cluster.index, rounds=fcfg.rounds)
            out[cluster.index] = weights
            log.info("cluster %d federated for %d rounds", cluster.index, fcfg.rounds)
    finally:
        with run.path("federated", "roundlog.jsonl").open("w") as fh:
            for line in lines:
                fh.write(json.dumps(line, sort_keys=True) + "\n")
    return out


def _centralized_jobs(cfg: ExperimentConfig, clustering: Clustering, clients: dict[str, ClientData]):
    """(name, members, hyperparams, init index, kind) per centralized model; all use the fleet-modal hyperparameters."""
    hp = clustering.fleet_hyperparams
    clusters = clustering.models()
    if cfg.centralized_scope == "fleet":
        jobs = [("fleet", sorted(clients), hp, 0, "ilp")]
    else:
        jobs = [(str(c.index), list(c.members), hp, c.index, "ilp") for c in clusters]
    if cfg.centralized_alp == "aggregate":
        jobs += [(str(c.index), list(c.members), hp, c.index, "alp") for c in clusters]
    return jobs


def _centralized_one(job, cfg: ExperimentConfig, clients: dict[str, ClientData]):
    name, ids, hp, index, kind = job
    group = [clients[c] for c in ids]
    if kind == "alp":
        model = train_local(
            aggregate_client(group), hp, cfg.base_spec, centralized_seed(cfg, f"alp{name}"), cfg.optimizer,
            init_base(cfg) + index, scheme="centralized",
        )
    else:
        model = train_centralized(
            group, hp, cfg.base_spec, centralized_seed(cfg, name), cfg.optimizer, init_base(cfg) + index
        )
    return name, kind, model


def stage_centralize(run: Run) -> None:
    cfg = run.config
    clients = load_clients(run, "centralize")
    clustering = load_clustering(run, "centralize")
    jobs = _centralized_jobs(cfg, clustering, clients)
    scalers = {}
    with worker_map(cfg.workers) as pmap:
        for name, kind, model in pmap(partial(_centralized_one, cfg=cfg, clients=clients), jobs):
            run.save_weights(f"centralized/{kind}_{name}.pvec", model.weights)
            scalers[f"{kind}_{name}"] = model.scaler.to_dict()
    run.write_json(
        "centralized/models.json",
        {"scope": cfg.centralized_scope, "alp": cfg.centralized_alp, "scalers": scalers},
    )


def _local_one(job, cfg: ExperimentConfig, clients: dict[str, ClientData]):
    cid, hp, index = job
    return cid, train_local(clients[cid], hp, cfg.base_spec, client_seed(cfg, cid), cfg.optimizer, init_base(cfg) + index)


def stage_localize(run: Run) -> None:
    cfg = run.config
    clients = load_clients(run, "localize")
    clustering = load_clustering(run, "localize")
    labels = clustering.assignment.labels
    jobs = [(c, clustering.hyperparams[labels[c]], labels[c]) for c in sorted(clients)]
    with worker_map(cfg.workers) as pmap:
        for cid, model in pmap(partial(_local_one, cfg=cfg, clients=clients), jobs):
            run.save_weights(f"local/{cid}.pvec", model.weights, client=cid)
    run.write_json("local/models.json", {"clients": sorted(clients)})


# ---------------------------------------------------------------- report


def _model(run: Run, scheme: str, path: str, stage: str, scaler: Scaler | None = None) -> TrainedModel:
    weights = run.load_weights(path, stage)
    return TrainedModel(scheme, NetworkSpec.from_manifest(weights.manifest), weights, scaler)


def stage_report(run: Run) -> list:
    cfg = run.config
    missing = [s for s in SCHEMES if s not in cfg.schemes]
    if missing:
        raise StageError("report", f"report needs all schemes; config omits {missing}")
    clients = load_clients(run, "report")
    clustering = load_clustering(run, "report")
    central = run.read_json("centralized/models.json", "report")
    run.read_json("local/models.json", "report")
    scalers = {k: Scaler(v["min"], v["max"]) for k, v in central["scalers"].items()}

    reports = []
    for cluster in clustering.models():
        j = cluster.index
        group = [clients[c] for c in cluster.members]
        fed = _model(run, "federated", f"federated/cluster_{j}.pvec", "report")
        cname = "fleet" if central["scope"] == "fleet" else str(j)
        cen = _model(run, "centralized", f"centralized/ilp_{cname}.pvec", "report", scalers[f"ilp_{cname}"])
        loc = {
            c.client_id: _model(run, "local", f"local/{c.client_id}.pvec", "report", c.scaler) for c in group
        }
        ilp, alp = {}, {}
        for split in SPLITS:
            parts = {
                "federated": [predict_ilp(fed, c, split) for c in group],
                "centralized": [predict_ilp(cen, c, split) for c in group],
                "local": [predict_ilp(loc[c.client_id], c, split) for c in group],
            }
            for scheme in SCHEMES:
                ilp[(scheme, split)] = parts[scheme]
            alp[("federated", split)] = sum_predictions("federated", parts["federated"])
            alp[("local", split)] = sum_predictions("local", parts["local"])
            if central["alp"] == "aggregate":
                agg_model = _model(run, "centralized", f"centralized/alp_{j}.pvec", "report", scalers[f"alp_{j}"])
                alp[("centralized", split)] = predict_alp("centralized", group, split, aggregate_model=agg_model)
            else:
                alp[("centralized", split)] = sum_predictions("centralized", parts["centralized"])
            if cfg.traces:
                write_trace([alp[(s, split)] for s in SCHEMES], run.path("traces", f"cluster_{j}_alp_{split}.csv"))
                for i, c in enumerate(group):
                    write_trace(
                        [parts[s][i] for s in SCHEMES], run.path("traces", f"cluster_{j}_{c.client_id}_{split}.csv")
                    )
        reports.append(build_report(j, ilp, alp, [c.series for c in group]))
    write_reports(reports, run.path("report.json"), run.path("report.csv"), {"config_hash": run.hash})
    return reports


# ---------------------------------------------------------------- ablation


def run_clustering_ablation(run: Run) -> dict:
    """Probe-client loss curves with hyperparameter clustering and with a single fleet-wide cluster.

    Both runs use the same client seeds, initialisation seed and round count.
    """
    cfg = run.config
    clients = load_clients(run, "ablate")
    clustering = load_clustering(run, "ablate")
    probe = cfg.probe_client or sorted(clients)[0]
    if probe not in clients:
        raise ConfigError(f"probe client {probe!r} is not in the fleet")
    rounds = cfg.ablation_rounds or cfg.rounds or math.ceil(clustering.fleet_hyperparams.epochs / cfg.local_epochs)
    fcfg = cfg.federation(rounds=rounds, cluster_seed=init_base(cfg))
    home = next(c for c in clustering.models() if probe in c.members)
    everyone = ClusterModel(0, tuple(sorted(clients)), clustering.fleet_hyperparams)

    def curve(cluster: ClusterModel) -> dict:
        spec = cluster.hyperparams.network(cfg.base_spec)
        try:
            _, logs = run_federation(
                cluster, _client_states(cfg, clients, cluster.members), fcfg, spec, cfg.optimizer, cfg.workers
            )
        except FederationError as exc:
            raise StageError("ablate", str(exc)) from exc
        return {
            "cluster": cluster.index,
            "members": list(cluster.members),
            "hyperparams": list(cluster.hyperparams.as_tuple()),
            # None once the probe has been removed, so both curves keep T entries
            "loss": [entry.losses.get(probe) for entry in logs],
        }

    result = {"probe": probe, "rounds": rounds, "clustered": curve(home), "unclustered": curve(everyone)}
    run.write_json("ablation.json", result)
    with run.path("ablation.csv").open("w", newline="") as fh:
        fh.write(f"# config_hash: {run.hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "clustered_loss", "unclustered_loss"])
        for t, (a, b) in enumerate(zip(result["clustered"]["loss"], result["unclustered"]["loss"]), start=1):
            writer.writerow([t, "" if a is None else repr(a), "" if b is None else repr(b)])
    return result


# ---------------------------------------------------------------- driver

STAGE_FUNCS: dict[str, Callable[[Run], object]] = {
    "synth": stage_synth,
    "tune": stage_tune,
    "cluster": stage_cluster,
    "federate": stage_federate,
    "centralize": stage_centralize,
    "localize": stage_localize,
    "report": stage_report,
    "ablate": run_clustering_ablation,
}


def run_stage(run: Run, stage: str):
    """Run one stage, turning unexpected failures into :class:`StageError`."""
    log.info("stage %s (config %s)", stage, run.hash)
    try:
        return STAGE_FUNCS[stage](run)
    except (StageError, ConfigError):
        raise
    except Exception as exc:
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc


def pipeline_stages(cfg: ExperimentConfig) -> list[str]:
    stages = ["synth", "tune", "cluster"]
    stages += [s for s in ("federate", "centralize", "localize") if _scheme_of(s) in cfg.schemes]
    if all(s in cfg.schemes for s in SCHEMES):
        stages.append("report")
    if cfg.ablation:
        stages.append("ablate")
    return stages


def _scheme_of(stage: str) -> str:
    return {"federate": "federated", "centralize": "centralized", "localize": "local"}[stage]


def run_pipeline(cfg: ExperimentConfig) -> Run:
    run = Run.create(cfg)
    for stage in pipeline_stages(cfg):
        run_stage(run, stage)
    return run
