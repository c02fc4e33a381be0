"""Non-negative quadratic programs ``min 1/2 v'Qv + b'v  s.t.  v >= 0``.

These are tiny (one variable per past task), so a projected-gradient loop with
Barzilai-Borwein steps is enough.  Once the iterate has settled on a support,
the stationarity system restricted to that support is solved directly, which
takes the KKT residual down to rounding level.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class NnQp:
    Q: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=np.float64))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        T = self.b.size
        if T < 1 or self.Q.shape != (T, T):
            raise ValueError(f"Q must be {T}x{T}, got {self.Q.shape}")
        if not np.allclose(self.Q, self.Q.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(self.Q).max())):
            raise ValueError("Q is not symmetric")

    @classmethod
    def from_gradients(cls, G: np.ndarray, g: np.ndarray) -> "NnQp":
        """The GEM dual: ``Q = G G'`` and ``b = G g`` for past-task gradient rows ``G``."""
        G = np.atleast_2d(G)
        Q = G @ G.T
        return cls(0.5 * (Q + Q.T), G @ g)

    def objective(self, v) -> float:
        v = np.asarray(v, dtype=np.float64)
        return float(0.5 * v @ self.Q @ v + self.b @ v)


@dataclass
class QpResult:
    v: np.ndarray
    converged: bool
    iterations: int
    kkt_residual: float


def kkt_residual(qp: NnQp, v: np.ndarray) -> float:
    """Largest violation of dual feasibility, complementarity, or ``v >= 0``."""
    g = qp.Q @ v + qp.b
    return float(max(np.max(-v, initial=0.0),
                     np.max(-g, initial=0.0),
                     np.max(np.abs(v * g), initial=0.0)))


def _polish(qp: NnQp, v: np.ndarray, g: np.ndarray) -> np.ndarray | None:
    free = (v > 0) | (g < 0)
    if not free.any():
        return np.zeros_like(v)
    Qf = qp.Q[np.ix_(free, free)]
    sol, *_ = np.linalg.lstsq(Qf, -qp.b[free], rcond=None)
    if (sol < 0).any():
        return None
    out = np.zeros_like(v)
    out[free] = sol
    return out


def solve_nnqp(qp: NnQp, tol: float = 1e-9, max_iter: int = 10000) -> QpResult:
    if tol <= 0:
        raise ValueError("tol must be positive")
    Q, b = qp.Q, qp.b
    v = np.zeros_like(b)
    if (b >= 0).all():
        return QpResult(v, True, 0, kkt_residual(qp, v))

    best, best_res = v, kkt_residual(qp, v)
    g = b.copy()
    step = 1.0 / max(np.abs(Q).sum(axis=1).max(), np.finfo(float).tiny)
    history = [qp.objective(v)]
    for it in range(1, max_iter + 1):
        # non-monotone backtracking keeps BB steps safe on degenerate Q
        reference = max(history[-10:])
        trial_step = step
        while True:
            v_new = np.maximum(v - trial_step * g, 0.0)
            f_new = qp.objective(v_new)
            d = v_new - v
            if f_new <= reference + 1e-4 * g @ d or trial_step < 1e-16:
                break
            trial_step *= 0.5
        g_new = Q @ v_new + b
        s, y = v_new - v, g_new - g
        v, g = v_new, g_new
        history.append(f_new)
        sy = s @ y
        step = (s @ s) / sy if sy > 0 else step * 2.0

        for candidate in (v, _polish(qp, v, g)):
            if candidate is None:
                continue
            res = kkt_residual(qp, candidate)
            # v = 0 is feasible, so never hand back anything worse than it
            if res < best_res and qp.objective(candidate) <= 0.0:
                best, best_res = candidate, res
        if best_res <= tol:
            return QpResult(best, True, it, best_res)
        if not s.any():
            break
    return QpResult(best, best_res <= tol, it, best_res)
