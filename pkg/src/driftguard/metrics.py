"""Accuracy-matrix bookkeeping and the continual-learning scores derived from it."""
from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)


class IncompleteMatrixError(ValueError):
    pass


class RMatrix:
    """``values[i, j]``: test accuracy on task j after training finished on task i.

    Rows are filled one at a time, in order; cells above the diagonal may stay
    empty (NaN) since no score reads them.
    """

    def __init__(self, n_tasks: int):
        self.n_tasks = int(n_tasks)
        self.values = np.full((self.n_tasks, self.n_tasks), np.nan)
        self.rows_filled = 0

    @classmethod
    def from_lower(cls, rows) -> "RMatrix":
        """Build from ragged rows: ``rows[i]`` lists accuracies on tasks ``0..i``."""
        r = cls(len(rows))
        for row in rows:
            r.set_row(r.rows_filled, row)
        return r

    def set_row(self, i: int, accuracies) -> None:
        if i != self.rows_filled:
            raise ValueError(f"row {i} written out of order (next row is {self.rows_filled})")
        accuracies = np.asarray(accuracies, dtype=np.float64)
        if accuracies.size < i + 1 or accuracies.size > self.n_tasks:
            raise ValueError(f"row {i} needs between {i + 1} and {self.n_tasks} entries")
        if ((accuracies < 0) | (accuracies > 1)).any():
            raise ValueError("accuracies must lie in [0, 1]")
        self.values[i, : accuracies.size] = accuracies
        self.rows_filled += 1

    def lower(self) -> np.ndarray:
        lower = self.values[np.tril_indices(self.n_tasks)]
        if self.rows_filled < self.n_tasks or np.isnan(lower).any():
            raise IncompleteMatrixError("R must be filled on and below the diagonal")
        return lower

    def to_csv(self) -> str:
        lines = []
        for row in self.values:
            lines.append(",".join("" if np.isnan(v) else repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "RMatrix":
        rows = [line.split(",") for line in text.strip().splitlines()]
        r = cls(len(rows))
        for i, cells in enumerate(rows):
            r.values[i] = [float(c) if c else np.nan for c in cells]
        r.rows_filled = len(rows)
        return r


def accuracy(R: RMatrix) -> float:
    """Mean over the diagonal and everything below it."""
    lower = R.lower()
    n = R.n_tasks
    return float(lower.sum() / (n * (n + 1) / 2))


def backward_transfer(R: RMatrix) -> float:
    R.lower()
    n = R.n_tasks
    if n < 2:
        log.info("backward transfer of a single task is 0 by convention")
        return 0.0
    v = R.values
    total = 0.0
    for i in range(1, n):
        for j in range(i):
            total += v[i, j] - v[j, j]
    return float(total / (n * (n - 1) / 2))


def remembering(bwt: float) -> float:
    return 1.0 - abs(min(0.0, bwt))


def positive_bwt(bwt: float) -> float:
    return max(0.0, bwt)


def summarize(R: RMatrix) -> dict:
    bwt = backward_transfer(R)
    return {
        "accuracy": accuracy(R),
        "bwt": bwt,
        "remembering": remembering(bwt),
        "positive_bwt": positive_bwt(bwt),
    }


def eval_task(net, test) -> float:
    """Fraction of test samples whose argmax logit on the task's head is correct."""
    if len(test) == 0:
        raise ValueError(f"task {test.task_id}: empty test set")
    correct = 0
    for start in range(0, len(test), 2048):
        logits, _ = net.predict(test.inputs[start:start + 2048], test.task_id)
        correct += int((logits.argmax(axis=1) == test.labels[start:start + 2048]).sum())
    return correct / len(test)
