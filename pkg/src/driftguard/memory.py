"""Episodic memory of past-task inputs with their snapshot embeddings.

Each entry keeps the input ``x``, its task ``t``, the embedding ``h`` computed
right after training on ``t`` ended, and an unnormalized sampling weight ``p``.
Draws are made with probability ``p / sum(p)``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ConfigurationError

log = logging.getLogger(__name__)

WEIGHTINGS = ("uniform", "frequency", "distance", "pretrained_reference")
EPS = 1e-6


@dataclass
class MemoryEntry:
    x: np.ndarray
    t: int
    h: np.ndarray
    p: float = 1.0
    pick_count: int = 0
    last_distance: float | None = None
    y: int | None = None


def cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise ``1 - cos``; a zero-norm row counts as orthogonal (distance 1)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    dots = np.sum(a * b, axis=1)
    cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    return 1.0 - cos


class ReplayMemory:
    def __init__(self, per_task_budget: int, weighting: str = "uniform", reference_net=None, seed: int = 0):
        if per_task_budget < 1:
            raise ConfigurationError("per_task_budget must be positive")
        if weighting not in WEIGHTINGS:
            raise ConfigurationError(f"unknown weighting {weighting!r}; choose from {WEIGHTINGS}")
        self.per_task_budget = int(per_task_budget)
        self.weighting = weighting
        self.reference_net = reference_net
        self.entries: list[MemoryEntry] = []
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def tasks(self) -> list[int]:
        return sorted({e.t for e in self.entries})

    def task_entries(self, t: int) -> list[MemoryEntry]:
        return [e for e in self.entries if e.t == t]

    def task_arrays(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Stacked inputs and labels stored for task ``t``."""
        chosen = self.task_entries(t)
        return np.stack([e.x for e in chosen]), np.array([e.y for e in chosen], dtype=np.int64)

    def probabilities(self) -> np.ndarray:
        p = np.array([e.p for e in self.entries], dtype=np.float64)
        return p / p.sum()

    # -- writes ----------------------------------------------------------------------
    def commit_task(self, net, task_data) -> None:
        """Store a uniform sample of the finished task with current embeddings."""
        t = task_data.task_id
        if self.task_entries(t):
            raise ValueError(f"task {t} was already committed")
        n = len(task_data)
        budget = self.per_task_budget
        if budget > n:
            log.warning("memory budget %d exceeds task %d size %d; storing all", budget, t, n)
            budget = n
        idx = np.sort(self._rng.choice(n, size=budget, replace=False))
        x = task_data.inputs[idx]
        h = net.predict(x, t)[1]
        for i, row in enumerate(idx):
            self.entries.append(MemoryEntry(x[i].copy(), t, h[i].copy(), 1.0, 0, None, int(task_data.labels[row])))

    def sample(self, k: int, rng: np.random.Generator) -> list[MemoryEntry]:
        if k <= 0 or not self.entries:
            return []
        picks = rng.choice(len(self.entries), size=k, replace=True, p=self.probabilities())
        drawn = [self.entries[i] for i in picks]
        for e in drawn:
            e.pick_count += 1
        return drawn

    # -- weighting schemes --------------------------------------------------------------
    def reweight_frequency(self, drawn=None) -> None:
        for e in self.entries if drawn is None else drawn:
            e.p = 1.0 / (1.0 + e.pick_count)

    def reweight_distance(self, drawn, distances) -> None:
        distances = np.asarray(distances, dtype=np.float64)
        if (distances < 0).any():
            raise ValueError("distances must be non-negative")
        for e, d in zip(drawn, distances):
            e.p = float(d) + EPS
            e.last_distance = float(d)

    def reweight_pretrained_reference(self, current_batch: np.ndarray, drawn) -> None:
        """Weight each drawn entry by its mean distance to the batch, seen through a frozen net."""
        if self.reference_net is None:
            raise ConfigurationError("pretrained_reference weighting needs a reference network")
        if not drawn:
            return
        phi_batch = self.reference_net.embed(current_batch)
        phi_mem = self.reference_net.embed(np.stack([e.x for e in drawn]))
        for e, f in zip(drawn, phi_mem):
            d = cosine_distance(np.broadcast_to(f, phi_batch.shape), phi_batch)
            e.p = float(d.mean()) + EPS

    # -- export -----------------------------------------------------------------------------
    def dump(self, directory) -> None:
        """Write ``index.json`` plus raw little-endian float64 blocks ``x.f64`` and ``h.f64``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {
            "per_task_budget": self.per_task_budget,
            "weighting": self.weighting,
            "n_entries": len(self.entries),
            "x_dim": int(self.entries[0].x.size) if self.entries else 0,
            "h_dim": int(self.entries[0].h.size) if self.entries else 0,
            "dtype": "<f8",
            "entries": [
                {"t": e.t, "y": e.y, "p": e.p, "pick_count": e.pick_count, "last_distance": e.last_distance}
                for e in self.entries
            ],
        }
        (directory / "index.json").write_text(json.dumps(index, indent=1))
        for name in ("x", "h"):
            block = np.stack([getattr(e, name) for e in self.entries]) if self.entries else np.zeros(0)
            (directory / f"{name}.f64").write_bytes(block.astype("<f8").tobytes())

    @classmethod
    def load_dump(cls, directory) -> "ReplayMemory":
        directory = Path(directory)
        index = json.loads((directory / "index.json").read_text())
        mem = cls(index["per_task_budget"], index["weighting"])
        n = index["n_entries"]
        x = np.frombuffer((directory / "x.f64").read_bytes(), dtype="<f8").reshape(n, -1)
        h = np.frombuffer((directory / "h.f64").read_bytes(), dtype="<f8").reshape(n, -1)
        for i, meta in enumerate(index["entries"]):
            mem.entries.append(MemoryEntry(x[i].copy(), meta["t"], h[i].copy(), meta["p"],
                                           meta["pick_count"], meta["last_distance"], meta["y"]))
        return mem
