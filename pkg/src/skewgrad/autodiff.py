"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Tensors created directly by the user are *leaves*: they belong to no graph and
only collect gradients. Every primitive op appends one node to the graph of its
non-leaf inputs (or opens a fresh graph when all inputs are leaves; separate
graphs meeting in one op are merged), so append order is a valid topological
order and ``backward`` simply walks it in reverse. A graph is released after
its backward pass.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Tensor",
    "ShapeError",
    "GraphError",
    "tensor",
    "add",
    "sub",
    "mul_elementwise",
    "scale",
    "matmul",
    "add_rowwise",
    "relu",
    "concat_rows",
    "slice_rows",
    "max_over_rows",
    "segment_max",
    "mean_over_rows",
    "sum_all",
    "softmax_cross_entropy",
    "softmax_cross_entropy_per_sample",
    "backward",
    "finite_difference_check",
    "no_grad",
]


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Graph:
    """Append-only record of primitive ops for one forward/backward cycle."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.released = False

    def _append(self, node: "_Node") -> int:
        if self.released:
            raise GraphError("graph already consumed by backward(); build a new one")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], output: "Tensor", vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        # vjp(upstream) -> one array (or None) per input
        self.vjp = vjp


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "graph", "node_id")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.graph: Graph | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self.graph is None

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul_elementwise(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


_state = threading.local()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Skip graph recording in this thread, e.g. for evaluation forward passes."""
    prev = getattr(_state, "disabled", False)
    _state.disabled = True
    try:
        yield
    finally:
        _state.disabled = prev


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.graph is not None


def _record(op: str, inputs: Sequence[Tensor], out_values: np.ndarray, vjp) -> Tensor:
    out = Tensor(out_values)
    if getattr(_state, "disabled", False) or not any(_tracked(t) for t in inputs):
        return out
    graphs = list({id(t.graph): t.graph for t in inputs if t.graph is not None}.values())
    if any(g.released for g in graphs):
        raise GraphError(f"{op}: input graph already consumed by backward(); build a new one")
    graph = _merge(graphs) if graphs else Graph()
    out.graph = graph
    out.requires_grad = True
    out.node_id = graph._append(_Node(op, tuple(inputs), out, vjp))
    return out


def _merge(graphs: list[Graph]) -> Graph:
    """Fold independent graphs into the largest one.

    Nodes of a graph depend only on leaves and earlier nodes of the same graph,
    so appending a whole graph after another keeps append order topological.
    """
    target = max(graphs, key=len)
    for g in graphs:
        if g is target:
            continue
        offset = len(target.nodes)
        for node in g.nodes:
            node.output.node_id += offset
            node.output.graph = target
        target.nodes.extend(g.nodes)
        g.nodes = []
        g.released = True
    return target


def _is_scalar(t: Tensor) -> bool:
    return t.values.size == 1


def _reduce_to(grad: np.ndarray, like: Tensor) -> np.ndarray:
    if like.values.shape == grad.shape:
        return grad
    # scalar operand broadcast against a tensor
    return np.full(like.values.shape, grad.sum())


def _check_same_or_scalar(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_2d(op: str, *ts: Tensor) -> None:
    for t in ts:
        if t.values.ndim != 2:
            raise ShapeError(f"{op}: expected a 2-D tensor, got shape {t.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar("add", a, b)
    return _record(
        "add", (a, b), a.values + b.values,
        lambda g: (_reduce_to(g, a), _reduce_to(g, b)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar("sub", a, b)
    return _record(
        "sub", (a, b), a.values - b.values,
        lambda g: (_reduce_to(g, a), _reduce_to(-g, b)),
    )


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar("mul_elementwise", a, b)
    av, bv = a.values, b.values
    return _record(
        "mul", (a, b), av * bv,
        lambda g: (_reduce_to(g * bv, a), _reduce_to(g * av, b)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant (not differentiated)."""
    c = float(c)
    return _record("scale", (a,), a.values * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def add_rowwise(a: Tensor, bias: Tensor) -> Tensor:
    """a (M x D) plus a 1 x D row added to every row."""
    _check_2d("add_rowwise", a, bias)
    if bias.shape[0] != 1 or bias.shape[1] != a.shape[1]:
        raise ShapeError(f"add_rowwise: shape mismatch {a.shape} vs {bias.shape}")
    return _record(
        "add_rowwise", (a, bias), a.values + bias.values,
        lambda g: (g, g.sum(axis=0, keepdims=True)),
    )


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.values, 0.0)
    return _record("relu", (a,), out, lambda g: (g * (out > 0),))


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat_rows: nothing to concatenate")
    _check_2d("concat_rows", *tensors)
    width = tensors[0].shape[1]
    for t in tensors[1:]:
        if t.shape[1] != width:
            raise ShapeError(f"concat_rows: shape mismatch {tensors[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])
    out = np.concatenate([t.values for t in tensors], axis=0)
    return _record(
        "concat_rows", tensors, out,
        lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors))),
    )


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _check_2d("slice_rows", a)
    n = a.shape[0]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for shape {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.values)
        full[start:stop] = g
        return (full,)

    return _record("slice_rows", (a,), a.values[start:stop].copy(), vjp)


def max_over_rows(a: Tensor) -> Tensor:
    """Column-wise max, N x D -> 1 x D. Ties go to the lowest row index."""
    _check_2d("max_over_rows", a)
    if a.shape[0] == 0:
        raise ShapeError("max_over_rows: empty input")
    idx = np.argmax(a.values, axis=0)
    cols = np.arange(a.shape[1])

    def vjp(g):
        full = np.zeros_like(a.values)
        full[idx, cols] = g[0]
        return (full,)

    return _record("max_over_rows", (a,), a.values[idx, cols][None, :], vjp)


def segment_max(a: Tensor, lengths: Sequence[int]) -> Tensor:
    """Column-wise max within consecutive row segments, sum(lengths) x D -> B x D.

    Batched form of ``max_over_rows``; same lowest-index tie rule.
    """
    _check_2d("segment_max", a)
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.ndim != 1 or np.any(lengths < 1) or lengths.sum() != a.shape[0]:
        raise ShapeError(f"segment_max: lengths {lengths.tolist()} do not tile shape {a.shape}")
    d = a.shape[1]
    if np.all(lengths == lengths[0]):
        b, n = len(lengths), int(lengths[0])
        local = np.argmax(a.values.reshape(b, n, d), axis=1)
        rows = local + (np.arange(b) * n)[:, None]
    else:
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        rows = np.stack([
            s + np.argmax(a.values[s:s + n], axis=0) for s, n in zip(starts, lengths)
        ])
    cols = np.broadcast_to(np.arange(d), rows.shape)
    out = a.values[rows, cols]

    def vjp(g):
        full = np.zeros_like(a.values)
        full[rows, cols] = g
        return (full,)

    return _record("segment_max", (a,), out, vjp)


def mean_over_rows(a: Tensor) -> Tensor:
    _check_2d("mean_over_rows", a)
    n = a.shape[0]
    return _record(
        "mean_over_rows", (a,), a.values.mean(axis=0, keepdims=True),
        lambda g: (np.broadcast_to(g / n, a.values.shape).copy(),),
    )


def sum_all(a: Tensor) -> Tensor:
    return _record(
        "sum", (a,), np.asarray(a.values.sum()),
        lambda g: (np.full(a.values.shape, float(g)),),
    )


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(logits: Tensor, labels) -> np.ndarray:
    _check_2d("softmax_cross_entropy", logits)
    labels = np.asarray(labels)
    b, k = logits.shape
    if b < 1:
        raise ShapeError("softmax_cross_entropy: empty batch")
    if labels.shape != (b,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} vs logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k}), got {labels.tolist()}")
    return labels.astype(np.int64)


def softmax_cross_entropy_per_sample(logits: Tensor, labels) -> Tensor:
    """B x K logits, B labels -> B x 1 column of -log softmax(logits)[label]."""
    labels = _check_labels(logits, labels)
    b = len(labels)
    logp = _log_softmax(logits.values)
    losses = -logp[np.arange(b), labels][:, None]

    def vjp(g):
        grad = np.exp(logp)
        grad[np.arange(b), labels] -= 1.0
        return (grad * g,)

    return _record("softmax_xent_per_sample", (logits,), losses, vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-shift stabilized."""
    labels = _check_labels(logits, labels)
    b = len(labels)
    logp = _log_softmax(logits.values)
    loss = -logp[np.arange(b), labels].mean()

    def vjp(g):
        grad = np.exp(logp)
        grad[np.arange(b), labels] -= 1.0
        return (grad * (float(g) / b),)

    return _record("softmax_xent", (logits,), np.asarray(loss), vjp)


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    The graph is released afterwards unless ``retain_graph`` is set, which lets
    several losses sharing one forward pass be differentiated separately.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = loss.graph
    if graph is None:
        # loss is itself a leaf (or a constant)
        if loss.requires_grad:
            loss.grad = (0.0 if loss.grad is None else loss.grad) + np.ones_like(loss.values)
        return
    if graph.released:
        raise GraphError("backward: graph already released")
    adjoints: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
    for node_id in range(loss.node_id, -1, -1):
        g = adjoints.pop(node_id, None)
        if g is None:
            continue
        node = graph.nodes[node_id]
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not _tracked(inp):
                continue
            if inp.graph is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif inp.node_id in adjoints:
                adjoints[inp.node_id] = adjoints[inp.node_id] + gi
            else:
                adjoints[inp.node_id] = gi
    if not retain_graph:
        graph.released = True
        graph.nodes.clear()


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5
) -> float:
    """Max over coordinates of |analytic - central difference| / (|analytic| + 1e-12).

    ``f`` must build a fresh graph on every call.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.values, dtype=np.float64, order="C")
    probe = Tensor(base.copy(), requires_grad=True)
    backward(f(probe))
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad

    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        shifted = base.copy().reshape(-1)
        shifted[i] += step
        up = f(Tensor(shifted.reshape(base.shape))).item()
        shifted[i] -= 2 * step
        down = f(Tensor(shifted.reshape(base.shape))).item()
        flat[i] = (up - down) / (2 * step)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-12)
    return float(err.max()) if err.size else 0.0
