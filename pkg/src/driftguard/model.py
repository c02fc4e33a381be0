"""Multi-layer perceptron with shared or per-task classification heads."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tensor import DimensionError, Tensor, concat_flat, matmul, relu

SHARED = "shared"
PER_TASK = "per-task"


class MissingHeadError(KeyError):
    pass


@dataclass(frozen=True)
class HeadPolicy:
    mode: str = SHARED
    classes_per_head: int = 10
    n_heads: int = 1

    def __post_init__(self):
        if self.mode not in (SHARED, PER_TASK):
            raise ValueError(f"unknown head mode {self.mode!r}")
        if self.classes_per_head < 1 or self.n_heads < 1:
            raise ValueError("classes_per_head and n_heads must be positive")
        if self.mode == SHARED and self.n_heads != 1:
            raise ValueError("shared head policy has exactly one head")


class Network:
    """ReLU MLP whose parameters live in one contiguous float64 buffer.

    Parameter order in the flat vector: for each hidden layer its weight
    (``fan_in x fan_out``, row-major) followed by its bias, then for each head
    in index order its weight followed by its bias.  Every parameter tensor is
    a view into the buffer, so optimizers can update the flat vector in place.
    """

    def __init__(self, input_dim: int, hidden_sizes, heads: HeadPolicy | None = None, seed: int = 0):
        self.input_dim = int(input_dim)
        self.hidden_sizes = [int(h) for h in hidden_sizes]
        self.heads = heads or HeadPolicy()
        self.seed = seed

        shapes = []
        widths = [self.input_dim] + self.hidden_sizes
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        for _ in range(self.heads.n_heads):
            shapes += [(widths[-1], self.heads.classes_per_head), (self.heads.classes_per_head,)]
        self._shapes = shapes
        n_params = int(np.sum([np.prod(s) for s in shapes]))
        self._flat = np.zeros(n_params)
        self._flat_grad = np.zeros(n_params)
        self.params: list[Tensor] = []
        start = 0
        for shape in shapes:
            n = int(np.prod(shape))
            t = Tensor(self._flat[start:start + n].reshape(shape), requires_grad=True)
            t.grad = self._flat_grad[start:start + n].reshape(shape)
            self.params.append(t)
            start += n
        self._init_weights(np.random.default_rng(seed))

    def _init_weights(self, rng: np.random.Generator) -> None:
        for p in self.params:
            if p.data.ndim == 2:
                fan_in, fan_out = p.shape
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                p.data[...] = rng.uniform(-limit, limit, size=p.shape)

    # -- structure ---------------------------------------------------------------
    @property
    def n_params(self) -> int:
        return self._flat.size

    @property
    def embedding_dim(self) -> int:
        return self.hidden_sizes[-1] if self.hidden_sizes else self.input_dim

    @property
    def n_classes(self) -> int:
        return self.heads.classes_per_head

    def _head_index(self, task: int) -> int:
        if self.heads.mode == SHARED:
            return 0
        if not 0 <= task < self.heads.n_heads:
            raise MissingHeadError(f"no head for task {task} (network has {self.heads.n_heads})")
        return int(task)

    def hidden_params(self) -> list[Tensor]:
        return self.params[: 2 * len(self.hidden_sizes)]

    def head_params(self, task: int) -> list[Tensor]:
        k = 2 * len(self.hidden_sizes) + 2 * self._head_index(task)
        return self.params[k:k + 2]

    def head_slice(self, task: int) -> slice:
        """Location of a head's weight and bias inside the flat vector."""
        k = 2 * len(self.hidden_sizes) + 2 * self._head_index(task)
        start = int(np.sum([np.prod(s) for s in self._shapes[:k]]))
        n = int(np.prod(self._shapes[k]) + np.prod(self._shapes[k + 1]))
        return slice(start, start + n)

    # -- forward -------------------------------------------------------------------
    def forward(self, x, task: int = 0) -> tuple[Tensor, Tensor]:
        """Return ``(logits, embedding)``; the embedding is the input of the head."""
        w_head, b_head = self.head_params(task)
        h = self.embedding(x)
        return matmul(h, w_head) + b_head, h

    __call__ = forward

    def embedding(self, x) -> Tensor:
        """Taped hidden representation only; no head is evaluated."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"forward: expected (B, {self.input_dim}) input, got {x.shape}")
        h = x
        hidden = self.hidden_params()
        for w, b in zip(hidden[0::2], hidden[1::2]):
            h = relu(matmul(h, w) + b)
        return h

    def predict(self, x: np.ndarray, task: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Tape-free forward pass with values identical to :meth:`forward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"predict: expected (B, {self.input_dim}) input, got {x.shape}")
        w_head, b_head = self.head_params(task)
        h = x
        hidden = self.hidden_params()
        for w, b in zip(hidden[0::2], hidden[1::2]):
            a = h @ w.data + b.data
            h = np.where(a > 0, a, 0.0)
        return h @ w_head.data + b_head.data, h

    def embed(self, x: np.ndarray) -> np.ndarray:
        # the embedding does not depend on which head is selected
        return self.predict(x, 0)[1]

    # -- flat parameter access --------------------------------------------------
    def flat_params(self) -> Tensor:
        """Differentiable flat view of every parameter, in the documented order."""
        return concat_flat(self.params)

    def get_flat(self) -> np.ndarray:
        return self._flat.copy()

    def set_flat_params(self, v) -> None:
        v = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        if v.shape != self._flat.shape:
            raise DimensionError(f"set_flat_params: expected ({self.n_params},), got {v.shape}")
        self._flat[...] = v

    @property
    def flat_buffer(self) -> np.ndarray:
        """The live parameter buffer (mutations change the network)."""
        return self._flat

    def flat_grads(self) -> np.ndarray:
        return self._flat_grad.copy()

    @property
    def grad_buffer(self) -> np.ndarray:
        return self._flat_grad

    def zero_grad(self) -> None:
        self._flat_grad[...] = 0.0

    def copy(self) -> "Network":
        other = Network(self.input_dim, self.hidden_sizes, self.heads, self.seed)
        other.set_flat_params(self._flat)
        return other

    # -- checkpoints -----------------------------------------------------------------
    def describe(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_sizes": self.hidden_sizes,
            "heads": asdict(self.heads),
            "seed": self.seed,
            "n_params": self.n_params,
            "dtype": "<f8",
        }

    def save(self, path) -> None:
        """Write ``<path>.json`` (architecture) and ``<path>.bin`` (little-endian float64)."""
        path = Path(path)
        path.with_suffix(".json").write_text(json.dumps(self.describe(), indent=2))
        path.with_suffix(".bin").write_bytes(self._flat.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Network":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        net = cls(meta["input_dim"], meta["hidden_sizes"], HeadPolicy(**meta["heads"]), meta["seed"])
        values = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
        net.set_flat_params(values.astype(np.float64))
        return net
