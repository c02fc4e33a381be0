"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.  The
tape is rebuilt on every forward pass; :meth:`Tensor.backward` walks it once in
reverse topological order.

Leaf tensors (parameters) accumulate into ``grad``; intermediate nodes never
keep a gradient buffer, so each backward pass starts from fresh zeros for them.
Call :func:`zero_grad` (or ``Network.zero_grad``) on leaves between steps.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "add",
    "concat_flat",
    "cosine_similarity",
    "cross_entropy",
    "dot",
    "exp",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "norm",
    "pick",
    "relu",
    "scale",
    "softmax",
    "sub",
    "sum",
    "zero_grad",
]


class DimensionError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


def _shape_error(op: str, a, b) -> DimensionError:
    return DimensionError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward
        self.op = op

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    # -- reverse pass --------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ValueError(f"backward: root must be a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        else:
            t.grad[...] = 0.0


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# -- reductions ----------------------------------------------------------------
def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(out, (a,), back, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.shape != b.shape:
        raise _shape_error("dot", a.shape, b.shape)
    return _result(np.dot(a.data, b.data), (a, b), lambda g: (g * b.data, g * a.data), "dot")


def norm(a: Tensor) -> Tensor:
    n = float(np.sqrt(np.sum(a.data * a.data)))

    def back(g):
        if n == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / n,)

    return _result(np.array(n), (a,), back, "norm")


# -- linear algebra --------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T if a.requires_grad else None,
                              a.data.T @ g if b.requires_grad else None), "matmul")


def concat_flat(tensors: Sequence[Tensor]) -> Tensor:
    """Flatten and concatenate, preserving order; the inverse split is the backward."""
    sizes = [t.size for t in tensors]
    out = np.concatenate([t.data.reshape(-1) for t in tensors]) if tensors else np.zeros(0)

    def back(g):
        parts, start = [], 0
        for t, n in zip(tensors, sizes):
            parts.append(g[start:start + n].reshape(t.shape))
            start += n
        return tuple(parts)

    return _result(out, tuple(tensors), back, "concat")


def weighted_sq_dist(x: Tensor, centers: Sequence[np.ndarray], weights: Sequence[np.ndarray]) -> Tensor:
    """``sum_k sum_i w_k[i] * (c_k[i] - x[i])^2`` as one node; centers and weights are constants."""
    for c, w in zip(centers, weights):
        if c.shape != x.shape or w.shape != x.shape:
            raise DimensionError(f"weighted_sq_dist: x {x.shape} vs center {c.shape}, weight {w.shape}")
    total = 0.0
    slope = np.zeros_like(x.data)
    d, wd = np.empty_like(x.data), np.empty_like(x.data)  # reused: these vectors can be large
    for c, w in zip(centers, weights):
        np.subtract(x.data, c, out=d)
        np.multiply(w, d, out=wd)
        total += float(np.dot(wd.ravel(), d.ravel()))
        slope += wd
    return _result(np.asarray(total), (x,), lambda g: (2.0 * g * slope,), "wsqdist")


# -- probabilities -----------------------------------------------------------------
def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _result(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


def pick(a: Tensor, index) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, index[i]]`` for a 2-D ``a``."""
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise _shape_error("pick", a.shape, index.shape)
    rows = np.arange(a.shape[0])

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, index), g)
        return (out,)

    return _result(a.data[rows, index], (a,), back, "pick")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-probability of each row's target class."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise _shape_error("cross_entropy", logits.shape, targets.shape)
    n_classes = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        bad = int(targets[(targets < 0) | (targets >= n_classes)][0])
        raise IndexError(f"cross_entropy: target {bad} out of range for {n_classes} classes")
    return scale(mean(pick(log_softmax(logits), targets)), -1.0)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine of the angle between ``a[i]`` and ``b[i]``.

    Rows where either vector has zero norm get similarity 0 and no gradient.
    """
    if a.data.ndim != 2 or a.shape != b.shape:
        raise _shape_error("cosine_similarity", a.shape, b.shape)
    na = np.sqrt(np.sum(a.data * a.data, axis=1))
    nb = np.sqrt(np.sum(b.data * b.data, axis=1))
    denom = na * nb
    valid = denom > 0
    safe = np.where(valid, denom, 1.0)
    ab = np.sum(a.data * b.data, axis=1)
    s = np.where(valid, ab / safe, 0.0)

    def back(g):
        w = np.where(valid, g / safe, 0.0)[:, None]
        sa = np.where(valid, s / np.where(valid, na * na, 1.0), 0.0)[:, None]
        sb = np.where(valid, s / np.where(valid, nb * nb, 1.0), 0.0)[:, None]
        ga = w * b.data - g[:, None] * sa * a.data
        gb = w * a.data - g[:, None] * sb * b.data
        return ga, gb

    return _result(s, (a, b), back, "cosine")
