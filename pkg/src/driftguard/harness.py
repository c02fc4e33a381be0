"""Seeded end-to-end runs over a task stream, with artifact export."""
from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from . import data as D
from .metrics import RMatrix, eval_task, summarize
from .model import Network
from .optim import make_optimizer
from .strategies import StrategyConfig, make_strategy, train_task

log = logging.getLogger(__name__)

BENCHMARKS = ("permuted", "split", "synthetic")


class RunError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    benchmark: str = "permuted"
    data_root: str | None = None
    n_tasks: int = 4
    classes_per_task: int = 2
    hidden_sizes: list = field(default_factory=lambda: [400, 400, 400, 400])
    optimizer: str = "sgd"
    lr: float = 1e-3
    epochs: int = 1
    batch_size: int = 64
    train_subset: int | None = None
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    seed: int = 0
    out: str | None = None
    downsample: bool = False
    export_embeddings: bool = True
    synthetic: dict = field(default_factory=lambda: {
        "dim": 20, "classes": 2, "n_per_class": 200, "n_test_per_class": 100, "separation": 4.0})

    def __post_init__(self):
        if isinstance(self.strategy, dict):
            self.strategy = StrategyConfig.from_dict(self.strategy)
        if self.benchmark not in BENCHMARKS:
            raise D.ConfigurationError(f"unknown benchmark {self.benchmark!r}; choose from {BENCHMARKS}")
        if self.n_tasks < 1 or self.epochs < 1 or self.batch_size < 1:
            raise D.ConfigurationError("n_tasks, epochs and batch_size must be positive")
        self.hidden_sizes = [int(h) for h in self.hidden_sizes]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise D.ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.to_dict()
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        strategy_changes = changes.pop("strategy", None) or {}
        for k, v in changes.items():
            setattr(cfg, k, v)
        if strategy_changes:
            cfg.strategy = StrategyConfig.from_dict({**cfg.strategy.to_dict(), **strategy_changes})
        cfg.__post_init__()
        return cfg

    def mnist_root(self) -> Path:
        return Path(self.data_root) / "mnist" if self.data_root else D.data_root() / "mnist"

    def check_files(self) -> None:
        if self.benchmark == "synthetic":
            return
        root = self.mnist_root()
        for name in D.MNIST_FILES.values():
            if not (root / name).exists() and not (root / (name + ".gz")).exists():
                raise FileNotFoundError(f"config references missing dataset file {root / name}")


def load_config(path) -> ExperimentConfig:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    cfg = ExperimentConfig.from_dict(raw)
    cfg.check_files()
    return cfg


@lru_cache(maxsize=2)
def _mnist(root: str):
    return D.load_mnist(root)


def build_stream(cfg: ExperimentConfig) -> D.TaskStream:
    if cfg.benchmark == "synthetic":
        s = cfg.synthetic
        return D.synthetic_tasks(cfg.n_tasks, s["dim"], s["classes"], s["n_per_class"], cfg.seed,
                                 n_test_per_class=s.get("n_test_per_class"),
                                 separation=s.get("separation", 4.0),
                                 head_mode=s.get("head_mode", "per-task"))
    (x_tr, y_tr), (x_te, y_te) = _mnist(str(cfg.mnist_root()))
    if cfg.downsample:
        x_tr, x_te = D.downsample(x_tr), D.downsample(x_te)
    if cfg.train_subset:
        keep = np.sort(np.random.default_rng([cfg.seed, 7]).choice(len(y_tr), cfg.train_subset, replace=False))
        x_tr, y_tr = x_tr[keep], y_tr[keep]
    if cfg.benchmark == "permuted":
        return D.permuted_tasks((x_tr, y_tr), (x_te, y_te), cfg.n_tasks, cfg.seed)
    return D.split_tasks((x_tr, y_tr), (x_te, y_te), cfg.classes_per_task, cfg.seed)


@dataclass
class RunReport:
    r: RMatrix
    metrics: dict
    trajectory: list
    seconds: list
    config: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def strategy(self) -> str:
        return self.config["strategy"]["kind"]

    @property
    def total_seconds(self) -> float:
        return float(sum(self.seconds))

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "metrics": self.metrics,
            "rmatrix": [[None if np.isnan(v) else float(v) for v in row] for row in self.r.values],
            "trajectory": self.trajectory,
            "config": self.config,
            "diagnostics": self.diagnostics,
        }
        if include_timing:
            d["seconds"] = self.seconds
            d["total_seconds"] = self.total_seconds
        return d

    def deterministic_json(self) -> str:
        """Everything except wall-clock timings, serialized stably."""
        return json.dumps(self.to_dict(include_timing=False), sort_keys=True)


def run_experiment(cfg: ExperimentConfig, stream: D.TaskStream | None = None) -> RunReport:
    stream = stream if stream is not None else build_stream(cfg)
    n = min(cfg.n_tasks, len(stream))
    net = Network(stream.input_dim, cfg.hidden_sizes, stream.heads, seed=cfg.seed)
    optimizer = make_optimizer(cfg.optimizer, cfg.lr)
    strategy = make_strategy(cfg.strategy, net, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0])
    R = RMatrix(n)
    seconds = []
    for i in range(n):
        try:
            start = time.perf_counter()
            train_task(net, strategy, stream.train(i), cfg.epochs, optimizer, cfg.batch_size, rng)
            seconds.append(time.perf_counter() - start)
            R.set_row(i, [eval_task(net, stream.test(j)) for j in range(i + 1)])
        except Exception as exc:
            raise RunError(f"run aborted on task {i}: {exc}") from exc
        log.info("task %d done in %.1fs: %s", i, seconds[-1], np.round(R.values[i, : i + 1], 4).tolist())

    diagnostics = {}
    if cfg.strategy.kind == "gem":
        diagnostics = {
            "projected_steps": strategy.projected_steps,
            "total_steps": strategy.total_steps,
            "qp_failures": strategy.qp_failures,
            "worst_constraint": None if np.isinf(strategy.worst_constraint) else strategy.worst_constraint,
        }
    report = RunReport(R, summarize(R), [float(R.values[i, 0]) for i in range(n)], seconds,
                       cfg.to_dict(), diagnostics)
    if cfg.out:
        write_artifacts(report, cfg.out, net, stream, strategy)
    return report


def write_artifacts(report: RunReport, out, net: Network, stream: D.TaskStream, strategy) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rmatrix.csv").write_text(report.r.to_csv())
    metrics = dict(report.metrics, seconds=report.seconds, total_seconds=report.total_seconds)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    with open(out / "trajectory.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["after_task", "task0_accuracy"])
        for i, acc in enumerate(report.trajectory):
            w.writerow([i, repr(acc)])
    (out / "report.json").write_text(json.dumps(report.to_dict(include_timing=False), indent=2, sort_keys=True))
    net.save(out / "model")
    if report.config.get("export_embeddings", True):
        for k in range(report.r.n_tasks):
            export_embeddings(net, stream.test(k), out / f"embeddings_task{k}.csv")
    memory = getattr(strategy, "memory", None)
    if memory is not None:
        memory.dump(out / "memory_dump")


# -- embeddings ------------------------------------------------------------------------------
def _power_iteration(C: np.ndarray, rng: np.random.Generator, tol: float = 1e-13, max_iter: int = 20000):
    v = rng.normal(size=C.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = C @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return v, 0.0
        w /= nw
        if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
            v = w
            break
        v = w
    lam = float(v @ C @ v)
    return v, lam


def pca_2d(X: np.ndarray, seed: int = 0):
    """Top-2 principal directions by power iteration with deflation.

    Returns ``(components, projection, mean)`` where ``components`` is ``2 x H``
    with orthonormal rows and ``projection = (X - mean) @ components.T``.
    """
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    Xc = X - mean
    C = Xc.T @ Xc / max(X.shape[0] - 1, 1)
    rng = np.random.default_rng(seed)
    v1, l1 = _power_iteration(C, rng)
    v2, _ = _power_iteration(C - l1 * np.outer(v1, v1), rng)
    v2 = v2 - (v2 @ v1) * v1
    if np.linalg.norm(v2) < 1e-12:
        v2 = rng.normal(size=v1.size)
        v2 -= (v2 @ v1) * v1
    v2 /= np.linalg.norm(v2)
    components = np.vstack([v1, v2])
    return components, Xc @ components.T, mean


def export_embeddings(net: Network, test: D.TaskDataset, path) -> None:
    """CSV of every test sample's embedding with its label and 2-D PCA coordinates."""
    h = np.vstack([net.predict(test.inputs[s:s + 2048], test.task_id)[1] for s in range(0, len(test), 2048)])
    _, proj, _ = pca_2d(h)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "pc1", "pc2"] + [f"h{i}" for i in range(h.shape[1])])
        for label, p, row in zip(test.labels, proj, h):
            w.writerow([int(label), repr(float(p[0])), repr(float(p[1]))] + [repr(float(v)) for v in row])


# -- comparisons --------------------------------------------------------------------------------
def timing_report(reports: list[RunReport]) -> list[dict]:
    """Per-strategy total training seconds, with ratios to the naive run when present."""
    if len(reports) < 2:
        raise ValueError("timing_report needs at least two reports")
    key = lambda r: (r.config["benchmark"], r.r.n_tasks, r.config["epochs"])  # noqa: E731
    if len({key(r) for r in reports}) != 1:
        raise ValueError("reports come from different benchmarks and cannot be compared")
    naive = next((r.total_seconds for r in reports if r.strategy == "naive"), None)
    rows = []
    for r in reports:
        rows.append({
            "strategy": r.strategy,
            "seconds": r.total_seconds,
            "ratio_to_naive": None if naive is None else r.total_seconds / naive,
            "accuracy": r.metrics["accuracy"],
            "remembering": r.metrics["remembering"],
            "positive_bwt": r.metrics["positive_bwt"],
        })
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[("" if row[c] is None else f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]))
              for c in cols] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)
