"""Tensors and a tape-style computation graph with reverse-mode differentiation.

Operations executed while a :class:`Graph` is active are appended to it in
execution order, so insertion order is already a topological order and
:func:`backward` only needs a single reverse sweep.  Outside a graph, ops run
as plain numpy computations (inference mode).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ShapeError, StateError


class Tensor:
    """A dense array plus the bookkeeping needed for autodiff.

    ``data`` is a C-contiguous numpy array (channel-first for images).
    Parameters are tensors with ``requires_grad=True`` and a ``name``.
    """

    __slots__ = ("data", "requires_grad", "name", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[tuple[int, int]] = None  # (graph id, node id)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    shape = dims

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}{tag})"


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got dims {t.dims}")


@dataclass
class Node:
    """One recorded operation (or a leaf: ``input`` / ``parameter``)."""

    id: int
    kind: str
    inputs: tuple[int, ...]
    out_dims: tuple[int, ...]
    params: dict = field(default_factory=dict)
    backward_fn: Optional[Callable] = field(default=None, repr=False)
    tensor: Optional[Tensor] = field(default=None, repr=False)


_local = threading.local()
_graph_ids = iter(range(1, 1 << 62))


def current_graph() -> Optional["Graph"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Graph:
    """Ordered record of operations; use as a context manager.

    Graph state is thread-local, so independent graphs may be built
    concurrently on different threads.
    """

    def __init__(self):
        self.id = next(_graph_ids)
        self.nodes: list[Node] = []
        self._leaf_ids: dict[int, int] = {}

    def __enter__(self) -> "Graph":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _leaf(self, t: Tensor) -> int:
        key = id(t)
        if key in self._leaf_ids and self.nodes[self._leaf_ids[key]].tensor is t:
            return self._leaf_ids[key]
        kind = "parameter" if t.requires_grad else "input"
        node = Node(len(self.nodes), kind, (), t.dims, {"name": t.name}, None, t)
        self.nodes.append(node)
        self._leaf_ids[key] = node.id
        return node.id

    def node_of(self, t: Tensor) -> int:
        if t._node is not None and t._node[0] == self.id:
            return t._node[1]
        return self._leaf(t)

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray,
               backward_fn: Callable, **params) -> Tensor:
        ids = tuple(self.node_of(t) for t in inputs)
        result = Tensor(out)
        node = Node(len(self.nodes), kind, ids, result.dims, params, backward_fn, result)
        self.nodes.append(node)
        result._node = (self.id, node.id)
        return result

    def parameters(self) -> list[Tensor]:
        return [n.tensor for n in self.nodes if n.kind == "parameter"]


def apply_op(kind: str, inputs: Sequence[Tensor], out: np.ndarray,
             backward_fn: Callable, **params) -> Tensor:
    """Wrap a computed output, recording it when a graph is active.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    g = current_graph()
    if g is None:
        return Tensor(out)
    return g.record(kind, inputs, out, backward_fn, **params)


def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a map from parameter name to gradient and also stores each
    gradient on the parameter's ``.grad``.  Parameters that do not influence
    the loss receive zeros.
    """
    if loss._node is None or loss._node[0] != graph.id:
        raise StateError("backward() called on a tensor that was not produced by a forward pass in this graph")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got dims {loss.dims}")
    grads: dict[int, np.ndarray] = {loss._node[1]: np.ones_like(loss.data)}
    for node in reversed(graph.nodes[: loss._node[1] + 1]):
        g = grads.get(node.id)
        if g is None or node.backward_fn is None:
            continue
        in_grads = node.backward_fn(g)
        for src, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            if src in grads:
                grads[src] = grads[src] + ig
            else:
                grads[src] = ig
        # intermediate gradients are not needed once propagated
        if node.kind not in ("parameter", "input"):
            del grads[node.id]
    out: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.kind != "parameter":
            continue
        t = node.tensor
        grad = grads.get(node.id)
        if grad is None:
            grad = np.zeros_like(t.data)
        t.grad = grad.astype(t.data.dtype, copy=False)
        out[t.name if t.name is not None else f"param{node.id}"] = t.grad
    return out


def needs_grad(t: Tensor) -> bool:
    """True when gradients must flow into ``t`` (a parameter or an op output)."""
    return t.requires_grad or t._node is not None
