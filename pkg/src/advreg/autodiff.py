"""Small reverse-mode differentiation engine over dense float64 arrays.

A :class:`Graph` records every operation in creation order, which is already a
topological order. Leaves carry a partition tag; :func:`backward` only deposits
gradient into leaves whose tag is active, while still propagating through every
intermediate node on the way to them.
"""

from __future__ import annotations

import enum
from typing import Callable, Iterable, Sequence

import numpy as np


class Tag(str, enum.Enum):
    F_PARAMS = "F_PARAMS"
    G_PARAMS = "G_PARAMS"
    H_PARAMS = "H_PARAMS"
    FQ_PARAMS = "FQ_PARAMS"
    DATA = "DATA"


PARAM_TAGS = frozenset({Tag.F_PARAMS, Tag.G_PARAMS, Tag.H_PARAMS, Tag.FQ_PARAMS})
ALL_TAGS = frozenset(Tag)


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """A node in a :class:`Graph`. Values are read-only once constructed."""

    __slots__ = ("graph", "index", "value", "parents", "vjp", "tag", "name")

    def __init__(self, graph, value, parents=(), vjp=None, tag=None, name=None):
        value = np.asarray(value, dtype=np.float64).view()
        value.setflags(write=False)  # a view, so the caller's array stays writable
        self.graph = graph
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.tag = tag
        self.name = name
        self.index = graph._register(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.vjp is None

    def __repr__(self):
        label = self.name or ("leaf" if self.is_leaf else "op")
        return f"Tensor({label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scalar_scale(other, -1.0))

    def __neg__(self):
        return scalar_scale(self, -1.0)

    def __mul__(self, c):
        return scalar_scale(self, c)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Ordered record of operations for one forward/backward cycle."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._names: set[str] = set()

    def _register(self, node: Tensor) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value, tag: Tag = Tag.DATA, name: str | None = None) -> Tensor:
        tag = Tag(tag)
        if name is None:
            name = f"data:{len(self.nodes)}"
        if name in self._names:
            raise ContractError(f"duplicate leaf name {name!r}")
        self._names.add(name)
        return Tensor(self, value, tag=tag, name=name)

    def constant(self, value) -> Tensor:
        return self.leaf(value, Tag.DATA)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def _op(value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    graph = parents[0].graph
    for p in parents[1:]:
        if p.graph is not graph:
            raise ContractError("operands belong to different graphs")
    return Tensor(graph, value, parents, vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting (used for bias rows)."""
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _op(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def scalar_scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _op(c * x.value, (x,), lambda g: (c * g,))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _op(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two ``m×·`` tensors along columns."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat shape mismatch: {a.shape} | {b.shape}")
    k = a.shape[1]
    return _op(
        np.concatenate([a.value, b.value], axis=1),
        (a, b),
        lambda g: (g[:, :k], g[:, k:]),
    )


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for an integer array of ids, shape ``ids.shape + (e,)``."""
    ids = np.asarray(ids)
    if ids.size and not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding ids must be integers, got {ids.dtype}")
    ids = ids.astype(np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)].ravel()[0]
        raise IndexError(f"token id {int(bad)} outside vocabulary of size {vocab}")
    flat = ids.ravel()

    def vjp(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, flat, g.reshape(len(flat), -1))
        return (gt,)

    return _op(table.value[ids], (table,), vjp)


def mean_pool(x: Tensor) -> Tensor:
    """Average ``m×L×e`` over the sequence axis."""
    if x.value.ndim != 3:
        raise ShapeError(f"mean_pool expects a 3-d tensor, got {x.shape}")
    length = x.shape[1]
    shape = x.shape
    return _op(
        x.value.mean(axis=1),
        (x,),
        lambda g: (np.broadcast_to(g[:, None, :] / length, shape).copy(),),
    )


def mean(x: Tensor) -> Tensor:
    n = x.value.size
    shape = x.shape
    return _op(x.value.mean(), (x,), lambda g: (np.full(shape, float(g) / n),))


def log_softmax(logits: Tensor) -> Tensor:
    if logits.value.ndim != 2:
        raise ShapeError(f"log_softmax expects m×K, got {logits.shape}")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return _op(out, (logits,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def cross_entropy(log_probs: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood of integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    m, k = log_probs.shape
    if labels.shape != (m,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {m}")
    if m and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label outside [0, {k})")
    rows = np.arange(m)
    loss = -log_probs.value[rows, labels].mean()

    def vjp(g):
        out = np.zeros((m, k))
        out[rows, labels] = -float(g) / m
        return (out,)

    return _op(loss, (log_probs,), vjp)


def entropy_of_softmax(logits: Tensor) -> Tensor:
    """Per-row entropy of softmax(logits), evaluated as -sum(exp(lp) * lp)."""
    if logits.value.ndim != 2:
        raise ShapeError(f"entropy_of_softmax expects m×K, got {logits.shape}")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(lp)
    h = -(p * lp).sum(axis=1)
    # dH/dz_j = -p_j (lp_j + H)
    return _op(h, (logits,), lambda g: (-p * (lp + h[:, None]) * g[:, None],))


def grad_reverse(x: Tensor, lambda_q: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-lambda_q``."""
    lambda_q = float(lambda_q)
    if not lambda_q >= 0.0:
        raise ConfigError(f"lambda_q must be non-negative, got {lambda_q}")
    scale = -lambda_q
    return _op(x.value, (x,), lambda g: (scale * g,))


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, active: Iterable[Tag] = ALL_TAGS) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf of its graph, keyed by leaf name.

    Leaves whose tag is not in ``active`` get exact zeros even when a path exists.
    Subgraphs that cannot reach an active leaf are skipped.
    """
    active = frozenset(Tag(t) for t in active)
    if not active:
        raise ContractError("backward needs at least one active partition")
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = loss.graph
    nodes = graph.nodes[: loss.index + 1]

    needs = [False] * len(nodes)
    for i, node in enumerate(nodes):
        if node.is_leaf:
            needs[i] = node.tag in active
        else:
            needs[i] = any(needs[p.index] for p in node.parents)

    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for node in reversed(nodes):
        g = grads.get(node.index)
        if g is None or node.is_leaf:
            continue
        del grads[node.index]
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if not needs[parent.index]:
                continue
            prev = grads.get(parent.index)
            grads[parent.index] = pg if prev is None else prev + pg

    out = {}
    for node in graph.leaves():
        g = grads.get(node.index) if node.tag in active else None
        out[node.name] = np.zeros(node.shape) if g is None else np.asarray(g, dtype=np.float64)
    return out
