"""Dense float64 tensors with define-by-run reverse-mode autodiff.

The computation graph is a flat tape owned by a :class:`Graph`: every
operation appends one node, so tape order is already topological and the
backward sweep is a single reverse pass over node ids. Graphs are rebuilt on
every forward pass; model parameters live outside the graph as plain numpy
arrays and are wrapped as leaves at the start of each pass.

Everything is float64. Every operation checks that its output is finite and
raises :class:`NonFiniteError` otherwise, so NaN/Inf surface at the op that
produced them instead of silently corrupting a training run.

Operations called on constant tensors (no graph attached) return constant
tensors without recording anything, which makes evaluation-mode forward
passes tape-free.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeMismatchError",
    "NonFiniteError",
    "GraphError",
    "Graph",
    "Tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "concat_last",
    "slice_time",
    "slice_last",
    "embedding",
    "tanh",
    "sigmoid",
    "relu",
    "log",
    "exp",
    "softmax_rows",
    "layer_norm",
    "dropout",
    "masked_fill",
    "mse",
    "cross_entropy_logits",
    "sum_axis",
    "sum_all",
    "detach",
]

MASK_FILL_VALUE = -1e9  # additive constant for excluded attention positions


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeMismatchError(AutodiffError):
    """Operands have incompatible shapes."""


class NonFiniteError(AutodiffError):
    """An operation produced NaN or Inf."""


class GraphError(AutodiffError):
    """Graph misuse: mixing graphs, non-scalar loss, etc."""


class _Node:
    __slots__ = ("op", "input_ids", "backward_fn", "shape", "flops")

    def __init__(self, op, input_ids, backward_fn, shape, flops=0.0):
        self.op = op
        self.input_ids = input_ids
        self.backward_fn = backward_fn
        self.shape = shape
        self.flops = flops


class Graph:
    """Topologically ordered tape of op records for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, data) -> "Tensor":
        """Register ``data`` as a differentiable leaf (e.g. a parameter)."""
        value = np.asarray(data, dtype=np.float64)
        _check_finite(value, "leaf")
        self.nodes.append(_Node("leaf", (), None, value.shape))
        return Tensor(value, self, len(self.nodes) - 1)

    def flop_estimate(self) -> float:
        """Total multiply-accumulate count of all matmuls on the tape."""
        return sum(n.flops for n in self.nodes)

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """A dense float64 array, optionally tracked on a :class:`Graph`.

    ``graph is None`` marks a constant: it participates in ops but receives
    no gradient. ``node_id`` indexes the producing node on the tape.
    """

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data, graph: Graph | None = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tracked = "" if self.graph is None else f", node_id={self.node_id}"
        return f"Tensor(shape={self.data.shape}{tracked})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(value: np.ndarray, op: str) -> None:
    # one reduction as the fast path; a non-finite sum is confirmed
    # elementwise so huge-but-finite sums cannot raise spuriously
    if not np.isfinite(value.sum()) and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _graph_of(parents: Sequence[Tensor]) -> Graph | None:
    graph = None
    for p in parents:
        if p.graph is None:
            continue
        if graph is None:
            graph = p.graph
        elif graph is not p.graph:
            raise GraphError("operands belong to different graphs")
    return graph


def _make(op: str, value: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable | None, flops: float = 0.0) -> Tensor:
    _check_finite(value, op)
    graph = _graph_of(parents)
    if graph is None:
        return Tensor(value)
    ids = tuple(p.node_id if p.graph is not None else None for p in parents)
    graph.nodes.append(_Node(op, ids, backward_fn, value.shape, flops))
    return Tensor(value, graph, len(graph.nodes) - 1)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(graph: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns {node_id: gradient}.

    Gradients of shared subexpressions accumulate additively. Leaves that are
    unreachable from the loss get explicit zero gradients.
    """
    if loss.graph is not graph:
        raise GraphError("loss does not belong to this graph")
    if loss.data.ndim != 0:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
    for nid in range(loss.node_id, -1, -1):
        out_grad = grads.get(nid)
        if out_grad is None:
            continue
        node = graph.nodes[nid]
        if node.backward_fn is None:
            continue
        for pid, contrib in zip(node.input_ids, node.backward_fn(out_grad)):
            if pid is None or contrib is None:
                continue
            acc = grads.get(pid)
            grads[pid] = contrib if acc is None else acc + contrib
    for nid, node in enumerate(graph.nodes):
        if node.backward_fn is None and nid not in grads:
            grads[nid] = np.zeros(node.shape)
    return grads


# --- arithmetic ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make("mul", out, (a, b), bw)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    c = float(c)
    out = a.data * c

    def bw(g):
        return (g * c,)

    return _make("scale", out, (a,), bw)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``@`` semantics (stacked batch dims allowed).

    Backward follows dA = dC @ B^T and dB = A^T @ dC, with broadcast batch
    dimensions summed back out.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul operands must have at least 2 dims")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        da = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        db = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return da, db

    flops = 2.0 * out.size * a.data.shape[-1]
    return _make("matmul", out, (a, b), bw, flops=flops)


def transpose(a) -> Tensor:
    """Swap the last two axes (matrix transpose for 2-D inputs)."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeMismatchError("transpose needs at least 2 dims")
    out = np.swapaxes(a.data, -1, -2)

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _make("transpose", out, (a,), bw)


def concat_last(parts: Sequence) -> Tensor:
    """Concatenate along the last axis."""
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make("concat_last", out, tuple(parts), bw)


def slice_time(a, index: int, axis: int = 1) -> Tensor:
    """Select one index along ``axis`` (the time axis by default), dropping it."""
    a = _as_tensor(a)
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        full = np.zeros(a.data.shape)
        key = [slice(None)] * a.data.ndim
        key[axis] = index
        full[tuple(key)] = g
        return (full,)

    return _make("slice_time", out, (a,), bw)


def slice_last(a, start: int, stop: int) -> Tensor:
    """Contiguous range along the last axis."""
    a = _as_tensor(a)
    if not 0 <= start < stop <= a.data.shape[-1]:
        raise ShapeMismatchError(
            f"slice [{start}:{stop}] outside last axis of {a.data.shape}")
    out = a.data[..., start:stop]

    def bw(g):
        full = np.zeros(a.data.shape)
        full[..., start:stop] = g
        return (full,)

    return _make("slice_last", out, (a,), bw)


def embedding(weight, indices: np.ndarray) -> Tensor:
    """Row lookup ``weight[indices]``; equivalent to a one-hot matmul."""
    weight = _as_tensor(weight)
    indices = np.asarray(indices)
    if indices.min() < 0 or indices.max() >= weight.data.shape[0]:
        raise ShapeMismatchError("embedding index out of range")
    out = weight.data[indices]

    def bw(g):
        dw = np.zeros(weight.data.shape)
        np.add.at(dw, indices, g)
        return (dw,)

    return _make("embedding", out, (weight,), bw)


# --- elementwise nonlinearities -----------------------------------------


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _make("tanh", out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (a,), bw)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bw(g):
        return (g * (a.data > 0),)

    return _make("relu", out, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _make("log", out, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make("exp", out, (a,), bw)


# --- structured ops ------------------------------------------------------


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis, stabilized by subtracting the row max."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax_rows", out, (a,), bw)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then scale-shift.

    Variance is the population variance of the row; ``eps`` is added under
    the square root so constant rows map to zero instead of dividing by 0.
    """
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        dgamma = _unbroadcast(g * xhat, gamma.data.shape)
        dbeta = _unbroadcast(g, beta.data.shape)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _make("layer_norm", out, (a, gamma, beta), bw)


def dropout(a, p: float, rng: np.random.Generator | None = None,
            training: bool = False) -> Tensor:
    """Inverted dropout: kept entries are divided by (1-p) during training.

    In evaluation mode (``training=False``) this is the identity map and the
    input tensor is returned unchanged.
    """
    a = _as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = a.data * mask

    def bw(g):
        return (g * mask,)

    return _make("dropout", out, (a,), bw)


def masked_fill(a, allowed: np.ndarray) -> Tensor:
    """Additively push excluded positions to a large negative value.

    ``allowed`` is a boolean array broadcastable against ``a``; positions
    where it is False receive ``a + MASK_FILL_VALUE``. The additive form
    keeps backward a plain identity, avoiding NaN from (-inf) * 0.
    """
    a = _as_tensor(a)
    fill = np.where(allowed, 0.0, MASK_FILL_VALUE)
    out = a.data + fill

    def bw(g):
        return (_unbroadcast(g, a.data.shape),)

    return _make("masked_fill", out, (a,), bw)


def mse(pred, target) -> Tensor:
    """Mean squared error over all elements, as a scalar tensor."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeMismatchError(
            f"mse shapes disagree: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean())
    n = diff.size

    def bw(g):
        d = g * (2.0 / n) * diff
        return d, -d

    return _make("mse", out, (pred, target), bw)


def cross_entropy_logits(logits, labels: np.ndarray) -> Tensor:
    """Mean categorical cross-entropy from logits via a stable log-sum-exp."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeMismatchError("cross_entropy_logits expects [n, K] logits")
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.data.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ShapeMismatchError("labels must be [n] ints in [0, K)")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = m[:, 0] + np.log(e.sum(axis=-1))
    out = np.asarray((lse - logits.data[np.arange(n), labels]).mean())
    probs = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return _make("cross_entropy_logits", out, (logits,), bw)


def sum_axis(a, axis: int = -1) -> Tensor:
    """Sum along one axis, dropping it."""
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _make("sum_axis", out, (a,), bw)


def sum_all(a) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    out = np.asarray(a.data.sum())

    def bw(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make("sum_all", out, (a,), bw)


def detach(a) -> Tensor:
    """Stop-gradient: the same values as a constant tensor off the graph."""
    a = _as_tensor(a)
    return Tensor(a.data)
