"""Dense float64 tensors with eager reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
inputs and a closure mapping the output cotangent to input cotangents. Nodes
receive a global, monotonically increasing sequence number at creation, so the
sequence order is a topological order of any graph by construction; backward
simply walks reachable nodes in decreasing sequence order.

Graphs are single-use: :func:`backward` releases the closures it visits.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, NumericError

_counter = itertools.count()
_local = threading.local()

BackwardFn = Callable[[np.ndarray, tuple], Sequence]


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class ActivationCounter:
    """Tallies the number and total size of op outputs created while active."""

    def __init__(self):
        self.nodes = 0
        self.elements = 0
        self.largest = 0

    def add(self, size: int) -> None:
        self.nodes += 1
        self.elements += size
        self.largest = max(self.largest, size)


@contextmanager
def count_activations():
    counter = ActivationCounter()
    stack = getattr(_local, "counters", None)
    if stack is None:
        stack = _local.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _check_finite(data: np.ndarray, where: str) -> None:
    # a finite sum implies finite entries; only fall back to the full scan on overflow
    with np.errstate(over="ignore", invalid="ignore"):
        total = data.sum()
    if not np.isfinite(total) and not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by '{where}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An N-dimensional float64 array participating in a differentiation graph.

    Parameters
    ----------
    data : array_like
        Values; copied and converted to float64.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad`` on backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "op", "_parents", "_backward", "_seq")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: BackwardFn | None = None
        self._seq = next(_counter)

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward: BackwardFn, op: str) -> "Tensor":
        _check_finite(data, op)
        for counter in getattr(_local, "counters", ()):
            counter.add(data.size)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.is_leaf = False
        out.op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        out._seq = next(_counter)
        return out

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.is_leaf = True
        out.op = "detach"
        out._parents = ()
        out._backward = None
        out._seq = next(_counter)
        return out

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, leaves: Iterable["Tensor"] | None = None) -> None:
        backward(self, leaves)

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape

        def bw(g, needs):
            return (_unbroadcast(g, a) if needs[0] else None, _unbroadcast(g, b) if needs[1] else None)

        return Tensor._from_op(self.data + other.data, (self, other), bw, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape

        def bw(g, needs):
            return (_unbroadcast(g, a) if needs[0] else None, _unbroadcast(-g, b) if needs[1] else None)

        return Tensor._from_op(self.data - other.data, (self, other), bw, "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data

        def bw(g, needs):
            return (
                _unbroadcast(g * y, x.shape) if needs[0] else None,
                _unbroadcast(g * x, y.shape) if needs[1] else None,
            )

        return Tensor._from_op(x * y, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        out = x / y

        def bw(g, needs):
            return (
                _unbroadcast(g / y, x.shape) if needs[0] else None,
                _unbroadcast(-g * out / y, y.shape) if needs[1] else None,
            )

        return Tensor._from_op(out, (self, other), bw, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g, needs: (-g,), "neg")

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise ContractError("only scalar exponents are supported")
        x = self.data
        p = float(exponent)

        def bw(g, needs):
            return (g * p * x ** (p - 1.0),)

        return Tensor._from_op(x**p, (self,), bw, f"pow{p:g}")

    def __matmul__(self, other):
        return matmul(self, other)

    # -- elementwise ---------------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g, needs: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)
        return Tensor._from_op(out, (self,), lambda g, needs: (g / x,), "log")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._from_op(out, (self,), lambda g, needs: (0.5 * g / out,), "sqrt")

    def abs(self) -> "Tensor":
        x = self.data
        return Tensor._from_op(np.abs(x), (self,), lambda g, needs: (g * np.sign(x),), "abs")

    def square(self) -> "Tensor":
        x = self.data
        return Tensor._from_op(x * x, (self,), lambda g, needs: (2.0 * g * x,), "square")

    # -- reductions and shape ------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def bw(g, needs):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._from_op(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g, needs: (g.reshape(src),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._from_op(self.data.transpose(axes), (self,), lambda g, needs: (g.transpose(inv),), "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index) -> "Tensor":
        if isinstance(index, Tensor):
            raise ContractError("tensor-valued indices are not supported")
        shape = self.shape
        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

        def bw(g, needs):
            full = np.zeros(shape)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(np.array(self.data[index]), (self,), bw, "getitem")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data

    def bw(g, needs):
        return (g @ y.T if needs[0] else None, x.T @ g if needs[1] else None)

    return Tensor._from_op(x @ y, (a, b), bw, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)

    def bw(g, needs):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack_.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    return nodes


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves passed explicitly in ``leaves`` are guaranteed a gradient buffer,
    which stays exactly zero if the loss does not depend on them.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.zero_grad()
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in _reachable(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parents = node._parents
        needs = tuple(p.requires_grad for p in parents)
        for p, pg in zip(parents, node._backward(g, needs)):
            if pg is None or not p.requires_grad:
                continue
            if not np.isfinite(pg).all():
                raise NumericError(f"non-finite gradient in backward of '{node.op}' (node #{node._seq})")
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
        node._parents = ()
        node._backward = None
