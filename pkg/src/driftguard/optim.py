"""SGD and Adam acting in place on flat parameter vectors."""
from __future__ import annotations

import numpy as np


class NumericalError(ArithmeticError):
    pass


def _check_finite(grads: np.ndarray) -> None:
    finite = np.isfinite(grads)
    if not finite.all():
        idx = int(np.flatnonzero(~finite)[0])
        raise NumericalError(f"non-finite gradient {grads[idx]} at index {idx}")


class SGD:
    kind = "sgd"

    def __init__(self, lr: float = 1e-3):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        _check_finite(grads)
        params -= self.lr * grads

    def reset(self) -> None:
        pass


class Adam:
    kind = "adam"

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        _check_finite(grads)
        if self.m is None or self.m.shape != params.shape:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reset(self) -> None:
        """Forget both moment estimates and the step counter."""
        if self.m is not None:
            self.m[...] = 0.0
            self.v[...] = 0.0
        self.t = 0


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")
