"""Tape-free reverse-mode tensor.

Every op output remembers its parents and a closure that pushes the output
gradient back to them. ``Tensor.backward`` topologically sorts the graph
reachable from a scalar and replays the closures in reverse order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import NumericalError, ShapeError

_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def check_finite(value: np.ndarray, where: str) -> None:
    if not np.isfinite(value).all():
        raise NumericalError(f"non-finite values produced by {where}")


class Tensor:
    """A dense array with an optional accumulated gradient.

    Leaf tensors with ``requires_grad`` collect gradients in ``grad``; for
    parameters owned by a :class:`ParamStore` that buffer is a view into one
    flat array so the optimizer can update everything at once.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {self.value.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        if seed is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a seed needs a scalar tensor")
            seed = np.ones_like(self.value)
        seed = np.broadcast_to(np.asarray(seed, dtype=self.value.dtype), self.value.shape)
        order = _topological_order(self)
        # intermediate grads are transient; leaves keep theirs
        for node in order:
            if node._parents:
                node.grad = None
        self.accumulate(seed)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            check_finite(node.grad, f"backward of {node.name or 'op'}")
            node._backward(node.grad)
            if node._parents:
                node.grad = None

    # operator sugar; the implementations live in ops.py
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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self):
        from . import ops
        return ops.sum_all(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


def make(value: np.ndarray, parents: Sequence[Tensor], backward, name: str) -> Tensor:
    """Wrap an op result, recording the graph edge when needed."""
    check_finite(value, name)
    out = Tensor(value, name=name)
    if _GRAD_ENABLED:
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward
    return out


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
            if id(p) not in seen:
                stack.append((p, False))
    return order


class ParamStore:
    """Owns every learnable tensor and the non-learned buffers of a model.

    Parameters are registered individually, then :meth:`pack` moves them into
    one contiguous value array and one contiguous grad array. After packing,
    ``flat_values`` and ``flat_grads`` are the optimizer's view of the model.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}
        self.flat_values: np.ndarray | None = None
        self.flat_grads: np.ndarray | None = None
        self.flat_buffers: np.ndarray | None = None

    def parameter(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        if self.flat_values is not None:
            raise RuntimeError("store already packed")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> Tensor:
        """Register non-learned state (norm running statistics)."""
        if name in self.buffers:
            raise KeyError(f"duplicate buffer {name}")
        if self.flat_buffers is not None:
            raise RuntimeError("store already packed")
        t = Tensor(np.array(value, dtype=self.dtype), name=name)
        self.buffers[name] = t
        return t

    def pack(self) -> None:
        total = sum(t.value.size for t in self.params.values())
        self.flat_values = np.empty(total, dtype=self.dtype)
        self.flat_grads = np.zeros(total, dtype=self.dtype)
        offset = 0
        for t in self.params.values():
            n = t.value.size
            view = self.flat_values[offset:offset + n].reshape(t.value.shape)
            view[...] = t.value
            t.value = view
            t.grad = self.flat_grads[offset:offset + n].reshape(view.shape)
            offset += n
        btotal = sum(b.value.size for b in self.buffers.values())
        self.flat_buffers = np.empty(btotal, dtype=self.dtype)
        offset = 0
        for b in self.buffers.values():
            n = b.value.size
            view = self.flat_buffers[offset:offset + n].reshape(b.value.shape)
            view[...] = b.value
            b.value = view
            offset += n

    def zero_grad(self) -> None:
        if self.flat_grads is not None:
            self.flat_grads[...] = 0.0
        else:
            for t in self.params.values():
                t.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(t.value.size for t in self.params.values()))

    def __iter__(self) -> Iterable[Tensor]:
        return iter(self.params.values())
