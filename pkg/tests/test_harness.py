import json

import numpy as np
import pytest
import yaml

from driftguard.data import ConfigurationError
from driftguard.harness import (ExperimentConfig, RunError, export_embeddings, load_config, pca_2d,
                                run_experiment, timing_report)
from driftguard.metrics import RMatrix
from driftguard.model import Network


def synthetic_cfg(kind="naive", **kw):
    base = dict(benchmark="synthetic", n_tasks=3, hidden_sizes=[16, 16], lr=0.05, batch_size=10,
                synthetic={"dim": 8, "classes": 2, "n_per_class": 60, "n_test_per_class": 30},
                strategy={"kind": kind, "memory_per_task": 20, "reg_batch": 16})
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def test_same_seed_gives_identical_reports(tmp_path):
    names = ("rmatrix.csv", "trajectory.csv", "report.json", "embeddings_task0.csv", "model.bin",
             "memory_dump/x.f64", "memory_dump/index.json")
    a = run_experiment(synthetic_cfg("er", out=str(tmp_path)))
    first = {n: (tmp_path / n).read_bytes() for n in names}
    b = run_experiment(synthetic_cfg("er", out=str(tmp_path)))
    assert a.deterministic_json() == b.deterministic_json()
    for n in names:
        assert (tmp_path / n).read_bytes() == first[n], n


def test_different_seed_changes_run():
    assert run_experiment(synthetic_cfg()).deterministic_json() != \
        run_experiment(synthetic_cfg(seed=1)).deterministic_json()


def test_single_task_stream():
    rep = run_experiment(synthetic_cfg(n_tasks=1))
    assert rep.metrics["accuracy"] == rep.r.values[0, 0]
    assert rep.metrics["remembering"] == 1.0
    assert len(rep.trajectory) == 1 == len(rep.seconds)


def test_artifacts_written(tmp_path):
    rep = run_experiment(synthetic_cfg("gem", out=str(tmp_path)))
    assert set(json.loads((tmp_path / "metrics.json").read_text())) >= {
        "accuracy", "bwt", "remembering", "positive_bwt", "seconds"}
    R = RMatrix.from_csv((tmp_path / "rmatrix.csv").read_text())
    np.testing.assert_array_equal(R.values, rep.r.values)
    rows = (tmp_path / "trajectory.csv").read_text().splitlines()
    assert rows[0] == "after_task,task0_accuracy" and len(rows) == 4
    header = (tmp_path / "embeddings_task2.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["label", "pc1", "pc2"] and len(header) == 3 + 16
    assert (tmp_path / "memory_dump" / "index.json").exists()
    assert Network.load(tmp_path / "model").get_flat().size > 0
    assert rep.diagnostics["qp_failures"] == 0 and rep.diagnostics["total_steps"] > 0


def test_r_rows_follow_training_order():
    rep = run_experiment(synthetic_cfg())
    assert np.isnan(rep.r.values[np.triu_indices(3, 1)]).all()
    assert not np.isnan(rep.r.values[np.tril_indices(3)]).any()


def test_failure_names_the_task(monkeypatch):
    import driftguard.harness as H

    calls = []

    def boom(*a, **k):
        calls.append(1)
        if len(calls) == 2:
            raise FloatingPointError("bad")

    monkeypatch.setattr(H, "train_task", boom)
    with pytest.raises(RunError, match="task 1"):
        run_experiment(synthetic_cfg())


def test_er_remembers_better_than_naive_on_synthetic_split():
    naive = run_experiment(synthetic_cfg("naive", n_tasks=4, epochs=3))
    er = run_experiment(synthetic_cfg("er", n_tasks=4, epochs=3))
    assert er.metrics["remembering"] >= naive.metrics["remembering"]


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"bench": "permuted"})
    with pytest.raises(ConfigurationError):
        ExperimentConfig(benchmark="cifar")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(epochs=0)


def test_load_config_checks_files(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"benchmark": "permuted", "data_root": str(tmp_path / "nowhere")}))
    with pytest.raises(FileNotFoundError, match="nowhere"):
        load_config(path)
    path.write_text(yaml.safe_dump({"benchmark": "synthetic", "strategy": {"kind": "ewc", "lambda": 3}}))
    cfg = load_config(path)
    assert cfg.strategy.lam == 3 and cfg.strategy.kind == "ewc"


def test_replace_keeps_original():
    cfg = synthetic_cfg("er")
    other = cfg.replace(seed=5, strategy={"memory_per_task": 7})
    assert (cfg.seed, cfg.strategy.memory_per_task) == (0, 20)
    assert (other.seed, other.strategy.memory_per_task, other.strategy.kind) == (5, 7, "er")


# -- PCA ---------------------------------------------------------------------------------
def test_pca_planar_data_reconstructs_exactly(rng):
    basis = np.linalg.qr(rng.normal(size=(9, 2)))[0].T
    X = rng.normal(size=(200, 2)) * [3.0, 1.0] @ basis + rng.normal(size=9)
    comps, proj, mean = pca_2d(X)
    np.testing.assert_allclose(proj @ comps + mean, X, atol=1e-8)
    np.testing.assert_allclose(comps @ comps.T, np.eye(2), atol=1e-8)


def test_pca_finds_dominant_axis(rng):
    X = rng.normal(size=(2000, 6)) * [0.5, 0.5, 6.0, 0.5, 0.5, 0.5]
    comps, _, _ = pca_2d(X)
    assert abs(comps[0, 2]) > 0.999


def test_export_embeddings_csv(tmp_path):
    cfg = synthetic_cfg(n_tasks=1)
    from driftguard.harness import build_stream

    stream = build_stream(cfg)
    net = Network(stream.input_dim, [5], stream.heads)
    export_embeddings(net, stream.test(0), tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert len(lines) == 1 + len(stream.test(0))
    assert lines[0] == "label,pc1,pc2,h0,h1,h2,h3,h4"


# -- timing ------------------------------------------------------------------------------
def test_timing_report_rows_and_ratio():
    reps = [run_experiment(synthetic_cfg(k, n_tasks=2)) for k in ("naive", "er", "gem")]
    rows = timing_report(reps)
    assert [r["strategy"] for r in rows] == ["naive", "er", "gem"]
    assert rows[0]["ratio_to_naive"] == 1.0
    with pytest.raises(ValueError):
        timing_report(reps[:1])
    with pytest.raises(ValueError):
        timing_report([reps[0], run_experiment(synthetic_cfg(n_tasks=3))])


def test_shipped_configs_parse():
    from pathlib import Path

    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.yaml"))
    assert paths
    for path in paths:
        raw = yaml.safe_load(path.read_text())
        cfg = ExperimentConfig.from_dict(raw or {})
        assert cfg.strategy.kind in ("naive", "ewc", "gem", "er")
