"""Dense tensors and the append-only tape used for reverse-mode differentiation."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class GraphError(RuntimeError):
    """Raised for misuse of the tape (double backward, detached loss, ...)."""


class Node:
    """One recorded op: its inputs, its output and the vector-Jacobian rule."""

    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: Sequence["Tensor"], output: "Tensor", backward: Callable):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


class Graph:
    """Append-only list of op records.

    Backward walks the list in strict reverse append order, so an op's inputs
    always precede it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def append(self, node: Node) -> None:
        if self.consumed:
            raise GraphError("cannot record onto a graph that has already been differentiated")
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self):
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False


class _State(threading.local):
    def __init__(self):
        self.stack: list[Graph] = []
        self.default = Graph()
        self.grad_enabled = True
        self.meter: list[int] | None = None


_state = _State()


def current_graph() -> Graph:
    if _state.stack:
        return _state.stack[-1]
    if _state.default.consumed:
        _state.default = Graph()
    return _state.default


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def activation_meter():
    """Collect the byte size of every tensor produced by an op inside the block."""
    prev = _state.meter
    sizes: list[int] = []
    _state.meter = sizes
    try:
        yield sizes
    finally:
        _state.meter = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_graph", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._graph: Graph | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar, implemented in ops -------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        from . import ops
        return ops.max(self, axis=axis, keepdims=keepdims)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        arr = np.asarray(x)
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op's output and, if any input is tracked, record it on the tape."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out._graph = None
    tracked = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = tracked
    if _state.meter is not None:
        _state.meter.append(int(data.nbytes))
    if tracked:
        graph = current_graph()
        node = Node(inputs, out, backward)
        graph.append(node)
        out._node = node
        out._graph = graph
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Differentiate a scalar ``loss`` through the tape that produced it.

    Every ``requires_grad`` leaf reached gets the gradient accumulated into its
    ``.grad``; the returned map holds the contribution of this call only.
    The graph is consumed: a second call on the same tape raises.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = loss._graph
    if loss._node is None or graph is None:
        raise GraphError("loss is detached: it was not produced by a recorded op")
    if graph.consumed:
        raise GraphError("backward already ran on this graph; reset it before reusing")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                if gi.shape != inp.data.shape:
                    gi = np.broadcast_to(gi, inp.data.shape)
                prev = leaf_grads.get(inp)
                leaf_grads[inp] = gi.copy() if prev is None else prev + gi
                continue
            if inp._graph is not graph:
                raise GraphError("graph mixes tensors from a different, already consumed tape")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for leaf, g in leaf_grads.items():
        g = g.astype(leaf.data.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    graph.consumed = True
    graph.nodes.clear()
    return leaf_grads
