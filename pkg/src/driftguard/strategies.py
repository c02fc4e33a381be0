"""Continual-learning strategies and the sequential training loop.

A strategy plugs into the per-batch loop at three points:

* ``penalty``: extra differentiable loss added to the task cross-entropy
  (EWC, online EWC, SI, LwF);
* ``adjust_gradient``: rewrite the gradient before the optimizer step
  (GEM, A-GEM);
* ``after_step``: work after the step (SI path integral, the separate ER
  optimization on the embedding loss);

plus ``before_task`` / ``after_task`` for consolidation at task boundaries.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .data import ConfigurationError, minibatches
from .memory import WEIGHTINGS, ReplayMemory
from .model import SHARED, Network
from .qpsolve import NnQp, solve_nnqp
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)

KINDS = ("naive", "ewc", "ewc_online", "si", "lwf", "gem", "agem", "er")


@dataclass
class StrategyConfig:
    kind: str = "naive"
    lam: float = 1.0
    gamma: float = 1.0
    c: float = 1.0
    xi: float = 0.1
    memory_per_task: int = 100
    reg_batch: int = 64
    weighting: str = "distance"
    fisher_samples: int = 200

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown strategy {self.kind!r}; choose from {KINDS}")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if not 0.0 <= self.c <= 1.0:
            raise ConfigurationError("c must lie in [0, 1]")
        if self.xi <= 0:
            raise ConfigurationError("xi must be positive")
        if self.memory_per_task < 1 or self.reg_batch < 1 or self.fisher_samples < 1:
            raise ConfigurationError("memory_per_task, reg_batch and fisher_samples must be positive")
        if self.weighting not in WEIGHTINGS:
            raise ConfigurationError(f"unknown weighting {self.weighting!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown strategy keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["lambda"] = d.pop("lam")
        return d


@dataclass(frozen=True)
class ConsolidatedTask:
    theta_star: np.ndarray
    fisher: np.ndarray
    task_id: int

    def __post_init__(self):
        if self.theta_star.shape != self.fisher.shape:
            raise DimensionError(f"theta_star {self.theta_star.shape} vs fisher {self.fisher.shape}")
        if (self.fisher < 0).any():
            raise ValueError("importance values must be non-negative")


# -- penalties and importance estimates ----------------------------------------------
def ewc_penalty(theta: Tensor, consolidated, lam: float) -> Tensor:
    """``sum_k (lam/2) * sum_z F_kz (theta*_kz - theta_z)^2``."""
    for ct in consolidated:
        if ct.fisher.shape != theta.shape:
            raise DimensionError(f"ewc_penalty: theta {theta.shape} vs stored {ct.fisher.shape}")
    if not consolidated:
        return Tensor(0.0)
    dist = T.weighted_sq_dist(theta, [ct.theta_star for ct in consolidated], [ct.fisher for ct in consolidated])
    return T.scale(dist, lam / 2.0)


def merge_consolidated(consolidated) -> tuple[ConsolidatedTask, float]:
    """Fold several quadratic anchors into one plus a constant.

    ``sum_k F_k (theta - a_k)^2 == sum A (theta - m)^2 + offset`` with ``A = sum_k F_k``
    and ``m`` the F-weighted mean of the anchors, so the penalty costs one pass
    however many tasks are stored.
    """
    A = np.sum([ct.fisher for ct in consolidated], axis=0)
    B = np.sum([ct.fisher * ct.theta_star for ct in consolidated], axis=0)
    m = np.divide(B, A, out=np.zeros_like(B), where=A > 0)
    offset = float(sum(np.dot(ct.fisher, (ct.theta_star - m) ** 2) for ct in consolidated))
    return ConsolidatedTask(m, A, consolidated[-1].task_id), offset


def fisher_diagonal(net: Network, x: np.ndarray, t: int, y) -> np.ndarray:
    """Empirical Fisher diagonal: mean over samples of squared log-likelihood gradients."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("fisher_diagonal: empty batch")
    fisher = np.zeros(net.n_params)
    for i in range(x.shape[0]):
        net.zero_grad()
        logits, _ = net.forward(x[i:i + 1], t)
        T.sum(T.pick(T.log_softmax(logits), y[i:i + 1])).backward()
        g = net.grad_buffer
        fisher += g * g
    net.zero_grad()
    return fisher / x.shape[0]


def online_fisher_update(f_new: np.ndarray, f_prev: np.ndarray | None, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError("gamma must lie in [0, 1]")
    if f_prev is None:
        return f_new.copy()
    if f_prev.shape != f_new.shape:
        raise DimensionError(f"online_fisher_update: {f_new.shape} vs {f_prev.shape}")
    return f_new + gamma * f_prev


def lwf_penalty(old_probs, new_logits: Tensor, lam: float) -> Tensor:
    """Cross-entropy of the new predictions against frozen old probabilities, times ``lam``."""
    old = old_probs.data if isinstance(old_probs, Tensor) else np.asarray(old_probs, dtype=np.float64)
    if old.shape != new_logits.shape or old.ndim != 2:
        raise DimensionError(f"lwf_penalty: old {old.shape} vs new {new_logits.shape}")
    ce = T.sum(T.mul(Tensor(old), T.log_softmax(new_logits)))
    return T.scale(ce, -lam / old.shape[0])


def si_accumulate(path: np.ndarray, grads: np.ndarray, delta_theta: np.ndarray) -> None:
    """Add this step's contribution ``-g * delta`` to the path integral in place."""
    path -= grads * delta_theta


def si_consolidate(path: np.ndarray, theta_start: np.ndarray, theta_end: np.ndarray,
                   xi: float, c: float) -> np.ndarray:
    if xi <= 0:
        raise ConfigurationError("xi must be positive")
    delta = np.abs(theta_end - theta_start)
    return np.maximum(c * path / (delta * delta + xi), 0.0)


def cosine_distances(embedding: Tensor, stored: np.ndarray) -> Tensor:
    """Per-row ``1 - cos(h_stored, h_now)`` as a differentiable vector."""
    sims = T.cosine_similarity(embedding, Tensor(stored))
    return T.sub(Tensor(np.ones(sims.shape)), sims)


def gem_project(g: np.ndarray, G: np.ndarray, tol: float = 1e-9):
    """Return ``(g_bar, qp_result)``; ``qp_result`` is None when no constraint is violated."""
    dots = G @ g
    if (dots >= 0).all():
        return g, None
    res = solve_nnqp(NnQp.from_gradients(G, g), tol=tol)
    if not res.converged:
        log.warning("GEM QP did not converge (residual %.3g); using the raw gradient", res.kkt_residual)
        return g, res
    return G.T @ res.v + g, res


def agem_project(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    dot = float(g @ g_ref)
    if dot >= 0:
        return g
    ref_sq = float(g_ref @ g_ref)
    if ref_sq == 0.0:
        return g
    return g - (dot / ref_sq) * g_ref


def _grouped_loss(net: Network, x: np.ndarray, y: np.ndarray, t: np.ndarray) -> Tensor:
    """Mean cross-entropy over samples that may belong to different task heads."""
    if net.heads.mode == SHARED:
        return T.cross_entropy(net.forward(x, int(t[0]))[0], y)
    total = None
    for task in np.unique(t):
        mask = t == task
        term = T.scale(T.cross_entropy(net.forward(x[mask], int(task))[0], y[mask]), mask.sum() / t.size)
        total = term if total is None else total + term
    return total


# -- strategies ----------------------------------------------------------------------
class Strategy:
    """No-op hooks; also the naive fine-tuning baseline."""

    kind = "naive"

    def __init__(self, config: StrategyConfig, net: Network, seed: int = 0):
        self.config = config
        self.rng = np.random.default_rng([seed, 1])

    def before_task(self, net: Network, task) -> None:
        pass

    def penalty(self, net: Network, x: np.ndarray, t: int, logits: Tensor, embedding: Tensor):
        return None

    def adjust_gradient(self, net: Network, t: int) -> None:
        pass

    def after_step(self, net: Network, optimizer, x: np.ndarray, t: int, theta_before) -> None:
        pass

    def after_task(self, net: Network, task) -> None:
        pass

    needs_theta_before = False


class EWC(Strategy):
    kind = "ewc"

    def __init__(self, config, net, seed=0, online: bool = False):
        super().__init__(config, net, seed)
        self.online = online
        self.consolidated: list[ConsolidatedTask] = []
        self._merged = None

    def penalty(self, net, x, t, logits, embedding):
        if not self.consolidated or self.config.lam == 0:
            return None
        if len(self.consolidated) == 1:
            return ewc_penalty(net.flat_params(), self.consolidated, self.config.lam)
        merged, offset = self._merged
        return ewc_penalty(net.flat_params(), [merged], self.config.lam) + self.config.lam / 2.0 * offset

    def after_task(self, net, task):
        n = min(self.config.fisher_samples, len(task))
        idx = self.rng.choice(len(task), size=n, replace=False)
        fisher = fisher_diagonal(net, task.inputs[idx], task.task_id, task.labels[idx])
        theta = net.get_flat()
        if self.online:
            prev = self.consolidated[0].fisher if self.consolidated else None
            fisher = online_fisher_update(fisher, prev, self.config.gamma)
            self.consolidated = [ConsolidatedTask(theta, fisher, task.task_id)]
        else:
            self.consolidated.append(ConsolidatedTask(theta, fisher, task.task_id))
            self._merged = merge_consolidated(self.consolidated)


class SI(Strategy):
    kind = "si"
    needs_theta_before = True

    def __init__(self, config, net, seed=0):
        super().__init__(config, net, seed)
        self.path = np.zeros(net.n_params)
        self.importance = np.zeros(net.n_params)
        self.theta_start = net.get_flat()
        self.consolidated: list[ConsolidatedTask] = []

    def before_task(self, net, task):
        self.path[...] = 0.0
        self.theta_start = net.get_flat()

    def penalty(self, net, x, t, logits, embedding):
        if not self.consolidated or self.config.lam == 0 or not self.importance.any():
            return None
        return ewc_penalty(net.flat_params(), self.consolidated, self.config.lam)

    def after_step(self, net, optimizer, x, t, theta_before):
        si_accumulate(self.path, net.grad_buffer, net.flat_buffer - theta_before)

    def after_task(self, net, task):
        theta_end = net.get_flat()
        self.importance += si_consolidate(self.path, self.theta_start, theta_end, self.config.xi, self.config.c)
        self.consolidated = [ConsolidatedTask(theta_end, self.importance.copy(), task.task_id)]


class LwF(Strategy):
    kind = "lwf"

    def __init__(self, config, net, seed=0):
        super().__init__(config, net, seed)
        self.teacher: Network | None = None

    def before_task(self, net, task):
        self.teacher = net.copy() if task.task_id > 0 else None

    def _old_heads(self, net, t):
        return [0] if net.heads.mode == SHARED else list(range(t))

    def penalty(self, net, x, t, logits, embedding):
        if self.teacher is None or self.config.lam == 0:
            return None
        total = None
        for head in self._old_heads(net, t):
            old_logits, _ = self.teacher.predict(x, head)
            old = np.exp(T.log_softmax(Tensor(old_logits)).data)
            w, b = net.head_params(head)
            new_logits = logits if net.heads.mode == SHARED else T.matmul(embedding, w) + b
            term = lwf_penalty(old, new_logits, self.config.lam)
            total = term if total is None else total + term
        return total


class GEM(Strategy):
    kind = "gem"

    def __init__(self, config, net, seed=0):
        super().__init__(config, net, seed)
        self.memory = ReplayMemory(config.memory_per_task, "uniform", seed=seed + 101)
        self._stores: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.projected_steps = 0
        self.total_steps = 0
        self.qp_failures = 0
        self.worst_constraint = np.inf

    def _past_gradients(self, net, t):
        rows = []
        for past in sorted(self._stores):
            if past >= t:
                continue
            x, y = self._stores[past]
            net.zero_grad()
            T.cross_entropy(net.forward(x, past)[0], y).backward()
            rows.append(net.flat_grads())
        return np.array(rows)

    def adjust_gradient(self, net, t):
        self.total_steps += 1
        if not self._stores:
            return
        g = net.flat_grads()
        G = self._past_gradients(net, t)
        g_bar, res = gem_project(g, G)
        if res is not None:
            if res.converged:
                self.projected_steps += 1
                self.worst_constraint = min(self.worst_constraint, float((G @ g_bar).min()))
            else:
                self.qp_failures += 1
        net.grad_buffer[...] = g_bar

    def after_task(self, net, task):
        self.memory.commit_task(net, task)
        self._stores[task.task_id] = self.memory.task_arrays(task.task_id)


class AGEM(Strategy):
    kind = "agem"

    def __init__(self, config, net, seed=0):
        super().__init__(config, net, seed)
        self.memory = ReplayMemory(config.memory_per_task, "uniform", seed=seed + 101)

    def adjust_gradient(self, net, t):
        if not len(self.memory):
            return
        g = net.flat_grads()
        drawn = self.memory.sample(self.config.reg_batch, self.rng)
        x = np.stack([e.x for e in drawn])
        y = np.array([e.y for e in drawn], dtype=np.int64)
        tasks = np.array([e.t for e in drawn], dtype=np.int64)
        net.zero_grad()
        _grouped_loss(net, x, y, tasks).backward()
        g_ref = net.flat_grads()
        net.grad_buffer[...] = agem_project(g, g_ref)

    def after_task(self, net, task):
        self.memory.commit_task(net, task)


def er_regularize(net: Network, memory: ReplayMemory, lam: float, reg_batch: int, optimizer,
                  rng: np.random.Generator, current_batch: np.ndarray | None = None) -> float | None:
    """One optimizer step on ``lam * mean(1 - cos(h_stored, h_now))`` over a memory draw.

    Returns the mean distance measured before the step, or None when skipped
    (empty memory, or ``lam == 0`` which would be a zero-gradient step).
    """
    if lam == 0 or not len(memory):
        return None
    drawn = memory.sample(reg_batch, rng)
    x = np.stack([e.x for e in drawn])
    stored = np.stack([e.h for e in drawn])
    net.zero_grad()
    emb = net.embedding(x)
    dist = cosine_distances(emb, stored)
    degenerate = (np.linalg.norm(emb.data, axis=1) == 0) | (np.linalg.norm(stored, axis=1) == 0)
    if degenerate.any():
        log.debug("%d zero-norm embeddings treated as orthogonal", int(degenerate.sum()))
    loss = T.scale(T.mean(dist), lam)
    loss.backward()
    optimizer.step(net.flat_buffer, net.grad_buffer)
    distances = np.clip(dist.data, 0.0, 2.0)  # rounding can leave -1e-16
    if memory.weighting == "frequency":
        memory.reweight_frequency(drawn)
    elif memory.weighting == "distance":
        memory.reweight_distance(drawn, distances)
    elif memory.weighting == "pretrained_reference" and current_batch is not None:
        memory.reweight_pretrained_reference(current_batch, drawn)
    return float(distances.mean())


class ER(Strategy):
    kind = "er"

    def __init__(self, config, net, seed=0):
        super().__init__(config, net, seed)
        reference = None
        if config.weighting == "pretrained_reference":
            reference = Network(net.input_dim, net.hidden_sizes, net.heads, seed=seed + 7919)
        self.memory = ReplayMemory(config.memory_per_task, config.weighting, reference, seed=seed + 101)
        self.distances: list[float] = []

    def after_step(self, net, optimizer, x, t, theta_before):
        d = er_regularize(net, self.memory, self.config.lam, self.config.reg_batch, optimizer, self.rng, x)
        if d is not None:
            self.distances.append(d)

    def after_task(self, net, task):
        self.memory.commit_task(net, task)


def make_strategy(config: StrategyConfig, net: Network, seed: int = 0) -> Strategy:
    kind = config.kind
    if kind == "naive":
        return Strategy(config, net, seed)
    if kind in ("ewc", "ewc_online"):
        return EWC(config, net, seed, online=kind == "ewc_online")
    return {"si": SI, "lwf": LwF, "gem": GEM, "agem": AGEM, "er": ER}[kind](config, net, seed)


# -- training loop ----------------------------------------------------------------------
def train_task(net: Network, strategy: Strategy, task, epochs: int, optimizer,
               batch_size: int = 64, rng: np.random.Generator | None = None, on_step=None) -> None:
    """Sequentially optimize one task, then consolidate and reset the optimizer.

    Per mini-batch: step 1 minimizes cross-entropy plus any strategy penalty
    (with the gradient possibly projected); step 2 runs the strategy's
    ``after_step`` hook.  ``on_step`` (if given) sees the network after both.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    t = task.task_id
    strategy.before_task(net, task)
    for _ in range(epochs):
        for idx in minibatches(len(task), batch_size, rng):
            x, y = task.inputs[idx], task.labels[idx]
            net.zero_grad()
            logits, embedding = net.forward(x, t)
            loss = T.cross_entropy(logits, y)
            extra = strategy.penalty(net, x, t, logits, embedding)
            if extra is not None:
                loss = loss + extra
            loss.backward()
            strategy.adjust_gradient(net, t)
            before = net.get_flat() if strategy.needs_theta_before else None
            optimizer.step(net.flat_buffer, net.grad_buffer)
            strategy.after_step(net, optimizer, x, t, before)
            if on_step is not None:
                on_step(net)
    strategy.after_task(net, task)
    optimizer.reset()
