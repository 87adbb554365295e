"""Tensor type and the reverse-mode differentiation graph.

Every differentiable op records a :class:`Node` on its output tensor. Nodes
carry a global creation sequence number, so the reachable part of the graph
can always be replayed in exact reverse creation order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ContractError, GraphError

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One operation record: op kind, inputs and the closure computing input grads."""

    __slots__ = ("op", "inputs", "backward_fn", "seq", "released")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.released = False

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, seq={self.seq}, n_inputs={len(self.inputs)})"


class Tensor:
    """An n-dimensional float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # thin operator sugar, routed through the differentiable ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _as_tensor(other))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(_as_tensor(other), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, Tensor(-1.0))

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis=axis)

    def mean(self):
        from . import ops
        return ops.mean(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_output(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, attaching a graph node when any input needs a gradient."""
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._node = Node(op, inputs, backward_fn)
    return out


class Graph:
    """The part of the recorded graph reachable from one output.

    ``nodes`` holds ``(node, output_tensor)`` pairs in creation order; each
    node's inputs were created before it, so the order is topological.
    """

    def __init__(self, nodes: list, tensors: list):
        self.nodes = nodes
        self.tensors = tensors

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen: set[int] = set()
        pairs = []
        tensors = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            tensors.append(t)
            if t._node is not None:
                pairs.append((t._node.seq, t))
                stack.extend(t._node.inputs)
        pairs.sort(key=lambda p: p[0])
        return cls([(t._node, t) for _, t in pairs], tensors)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss`` that requires it.

    Gradients from repeated uses of a tensor (shared weights) are summed
    within the pass. Running backward twice over the same graph, or onto
    leaves whose grad has not been reset, raises :class:`GraphError`.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad; nothing to differentiate")

    graph = Graph.from_output(loss)
    for node, _ in graph.nodes:
        if node.released:
            raise GraphError(f"graph already consumed by a previous backward() (op {node.op})")
    for t in graph.tensors:
        if t.is_leaf and t.requires_grad and t.grad is not None:
            raise GraphError(
                f"leaf {t.name or t.shape} still holds a gradient; reset grads before backward()"
            )

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node, out in reversed(graph.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            g = np.zeros_like(out.data)
        out.grad = g
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
        node.backward_fn = None
        node.released = True

    for t in graph.tensors:
        if t.is_leaf and t.requires_grad:
            g = grads.get(id(t))
            t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64)
