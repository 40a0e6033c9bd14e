import json

import numpy as np
import pytest

from fedload.config import OUTPUT_ENV, ConfigError, ExperimentConfig, derive_seed, reference_fleet
from fedload.nn import ParameterVector
from fedload.pipeline import (
    Run,
    StageError,
    centralized_seed,
    client_seed,
    init_base,
    load_clustering,
    pipeline_stages,
    run_pipeline,
    run_stage,
)


# ---------------------------------------------------------------- config


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, "client", "a") == derive_seed(0, "client", "a")
    seeds = {derive_seed(m, kind, cid) for m in (0, 1) for kind in ("client", "tune") for cid in ("a", "b")}
    assert len(seeds) == 8
    assert 0 <= derive_seed(7, "x") < 2**32


def test_default_fleet_has_seventy_five_clients():
    assert sum(a.n_clients for a in reference_fleet().archetypes) == 75
    cfg = ExperimentConfig()
    assert (cfg.lookback, cfg.train_fraction, cfg.k, cfg.local_epochs) == (24, 0.75, 5, 5)
    assert (cfg.removal_factor, cfg.removal_lag) == (1.6, 20)


def test_hash_ignores_output_dir_and_workers(tiny_config):
    a = tiny_config
    assert a.with_overrides(output_dir="elsewhere", workers=4).hash() == a.hash()
    assert a.with_overrides(seed=1).hash() != a.hash()
    assert a.with_overrides(lr=0.5).optimizer.lr == 0.5
    assert a.with_overrides(epochs=[3]).grid.epochs == (3,)
    assert a.with_overrides(hours=48).fleet.hours == 48
    assert a.with_overrides(k=None).k is None


def test_config_round_trips_through_json(tiny_config, tmp_path):
    tiny_config.save(tmp_path / "c.json")
    payload = json.loads((tmp_path / "c.json").read_text())
    assert payload["config_hash"] == tiny_config.hash()
    payload.pop("config_hash")
    assert ExperimentConfig.from_dict(payload).hash() == tiny_config.hash()


@pytest.mark.parametrize(
    "bad",
    [
        {"nonsense": 1},
        {"k": 0},
        {"train_fraction": 1.0},
        {"removal_factor": 1.0},
        {"schemes": ["federated", "oracle"]},
        {"centralized_scope": "planet"},
        {"grid": {"fc1": [], "fc2": [4], "epochs": [2]}},
    ],
)
def test_invalid_configs_rejected(tiny_config, bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**tiny_config.to_dict(), **bad})


def test_load_errors_are_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "bad.json")


def test_env_var_overrides_output_dir(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert Run.create(tiny_config).root == tmp_path / "env"


# ---------------------------------------------------------------- stages


@pytest.fixture
def finished(tiny_config):
    return run_pipeline(tiny_config)


def test_pipeline_writes_every_artifact(finished):
    root = finished.root
    for name in ("config.json", "fleet.csv", "fleet.json", "tuning.json", "clusters.json", "report.json",
                 "report.csv", "ablation.json", "ablation.csv", "federated/roundlog.jsonl",
                 "centralized/models.json", "local/models.json"):
        assert (root / name).exists(), name
    h = finished.hash
    for name in ("tuning.json", "clusters.json", "report.json", "ablation.json"):
        assert json.loads((root / name).read_text())["config_hash"] == h
    for line in (root / "federated/roundlog.jsonl").read_text().splitlines():
        assert json.loads(line)["config_hash"] == h
    assert (root / "report.csv").read_text().startswith(f"# config_hash: {h}")


def test_report_covers_every_cluster_and_client(finished):
    rep = json.loads((finished.root / "report.json").read_text())
    clustering = load_clustering(finished, "report")
    assert [c["cluster"] for c in rep["clusters"]] == sorted(set(clustering.assignment.labels.values()))
    assert sum(c["n_clients"] for c in rep["clusters"]) == 4


def test_stage_rerun_is_idempotent(finished):
    before = {p: (finished.root / p).read_bytes() for p in ("report.json", "federated/roundlog.jsonl", "tuning.json")}
    for stage in ("tune", "federate", "report"):
        run_stage(finished, stage)
    assert before == {p: (finished.root / p).read_bytes() for p in before}


def test_changed_config_detected(finished):
    other = Run(finished.config.with_overrides(seed=99), finished.root)
    with pytest.raises(StageError) as err:
        run_stage(other, "federate")
    assert err.value.stage == "federate"
    assert "expected" in err.value.cause


def test_tampered_checkpoint_detected(finished):
    path = next((finished.root / "federated").glob("cluster_*.pvec"))
    w = ParameterVector.load(path)
    w.save(path, {"config_hash": "0" * 16})
    with pytest.raises(StageError):
        run_stage(finished, "report")


def test_missing_upstream_artifact(tiny_config):
    run = Run.create(tiny_config)
    with pytest.raises(StageError) as err:
        run_stage(run, "tune")
    assert "missing" in err.value.cause


def test_ablation_curves(finished):
    ab = json.loads((finished.root / "ablation.json").read_text())
    assert ab["probe"] == sorted(load_clustering(finished, "ablate").assignment.labels)[0]
    assert len(ab["clustered"]["loss"]) == len(ab["unclustered"]["loss"]) == ab["rounds"]
    assert len(ab["unclustered"]["members"]) == 4
    assert ab["probe"] in ab["clustered"]["members"]


def test_ablation_rejects_unknown_probe(tiny_config):
    run = Run.create(tiny_config.with_overrides(probe_client="nobody"))
    for stage in ("synth", "tune", "cluster"):
        run_stage(run, stage)
    with pytest.raises(ConfigError):
        run_stage(run, "ablate")


def test_stage_list_follows_schemes(tiny_config):
    assert pipeline_stages(tiny_config)[-2:] == ["report", "ablate"]
    partial = tiny_config.with_overrides(schemes=["local"], ablation=False)
    assert pipeline_stages(partial) == ["synth", "tune", "cluster", "localize"]


def test_k_larger_than_fleet_is_config_error(tiny_config):
    run = Run.create(tiny_config.with_overrides(k=9))
    run_stage(run, "synth")
    run_stage(run, "tune")
    with pytest.raises(ConfigError):
        run_stage(run, "cluster")


def test_seed_fan_out(tiny_config):
    assert client_seed(tiny_config, "a") != client_seed(tiny_config, "b")
    assert centralized_seed(tiny_config, 0) != centralized_seed(tiny_config, "alp0")
    assert init_base(tiny_config) == init_base(tiny_config.with_overrides(output_dir="x"))


# ---------------------------------------------------------------- scheme behaviour through the pipeline


def test_single_client_archetype_federated_equals_local(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "fleet": {"archetypes": [{"base_load": 0.3, "amplitude": 1.2, "peak_hour": 7, "noise_std": 0.05}],
                  "hours": 24 * 6, "seed": 0},
        "grid": {"fc1": [3], "fc2": [4], "epochs": [7]},
        "lstm_hidden": 3, "k": 1, "local_epochs": 3, "output_dir": str(tmp_path),
    })
    run = run_pipeline(cfg)
    rep = json.loads((run.root / "report.json").read_text())["clusters"][0]
    for split in ("train", "test"):
        assert rep["rmse_ilp"][split]["federated"] == rep["rmse_ilp"][split]["local"]
        assert rep["rmse_alp"][split]["federated"] == rep["rmse_alp"][split]["local"]


def test_local_models_isolated_from_other_clients(tiny_config, tmp_path):
    # a one-point grid keeps the shared hyperparameters fixed, so only data could leak in
    only_local = dict(schemes=["local"], ablation=False, k=1, fc1=[3], epochs=[4])
    a = run_pipeline(tiny_config.with_overrides(**only_local))
    louder = tiny_config.to_dict()
    louder["fleet"]["archetypes"][1]["noise_std"] = 0.9
    louder["output_dir"] = str(tmp_path / "other")
    b = run_pipeline(ExperimentConfig.from_dict(louder).with_overrides(**only_local))
    fleet_a = (a.root / "fleet.csv").read_text().splitlines()
    fleet_b = (b.root / "fleet.csv").read_text().splitlines()
    assert fleet_a != fleet_b
    col = fleet_a[0].split(",").index("a0_c000")
    assert [r.split(",")[col] for r in fleet_a] == [r.split(",")[col] for r in fleet_b]
    wa = ParameterVector.load(a.root / "local/a0_c000.pvec")
    wb = ParameterVector.load(b.root / "local/a0_c000.pvec")
    assert wa == wb


def test_pipeline_is_deterministic_across_workers(tiny_config, tmp_path):
    a = run_pipeline(tiny_config)
    b = run_pipeline(tiny_config.with_overrides(workers=2, output_dir=str(tmp_path / "par")))
    for name in ("report.json", "report.csv", "federated/roundlog.jsonl", "ablation.json", "tuning.json"):
        assert (a.root / name).read_bytes() == (b.root / name).read_bytes(), name
    for p in (a.root / "local").glob("*.pvec"):
        assert np.array_equal(ParameterVector.load(p).values, ParameterVector.load(b.root / "local" / p.name).values)
