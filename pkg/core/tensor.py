"""Reverse-mode automatic differentiation over float64 NumPy arrays.

A ``Tensor`` wraps a contiguous row-major float64 buffer. Every operation that
involves a tensor with ``requires_grad`` records its parents and a closure that
pushes the upstream gradient back into them; ``backward`` walks the recorded
graph in reverse topological order.
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import einops
import numpy as np

from .exceptions import NonFiniteError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_CHECK_FINITE = os.getenv("REPLICA_CHECK_FINITE", "0") == "1"
_GRAD_STATE = threading.local()


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf debug assertion on every produced tensor."""
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


def grad_enabled() -> bool:
    """Graph recording flag of the calling thread."""
    return getattr(_GRAD_STATE, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, finite differences)."""
    previous = grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = previous


@contextmanager
def record_branches() -> Iterator[list]:
    """Collect the branch masks of piecewise ops (leaky ReLU, abs, smooth L1) run inside the block."""
    previous = getattr(_GRAD_STATE, "branches", None)
    _GRAD_STATE.branches = []
    try:
        yield _GRAD_STATE.branches
    finally:
        _GRAD_STATE.branches = previous


def note_branch(mask: np.ndarray) -> None:
    branches = getattr(_GRAD_STATE, "branches", None)
    if branches is not None:
        branches.append(np.packbits(mask))


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach it."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(value: Union["Tensor", ArrayLike]) -> "Tensor":
    return value if isinstance(value, Tensor) else Tensor(value)


class Tensor:
    """Dense n-dimensional float64 array with optional gradient tracking."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        if _CHECK_FINITE and not np.isfinite(self.data).all():
            raise NonFiniteError(
                "non-finite value produced",
                error_code="NON_FINITE",
                details={"name": name, "shape": list(self.data.shape)},
            )

    # -- graph plumbing -------------------------------------------------

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], None],
        name: Optional[str] = None,
    ) -> "Tensor":
        """Create an op output, recording the graph only when a parent needs it."""
        needs_grad = grad_enabled() and any(p.requires_grad for p in parents)
        out = cls(data, requires_grad=needs_grad, name=name)
        if needs_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = unbroadcast(np.asarray(grad, dtype=np.float64), self.data.shape)
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Propagate gradients from this tensor to every leaf that requires them."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        self.grad = np.array(grad, dtype=np.float64).reshape(self.data.shape)

        for node in reversed(_topological_order(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediate gradients are not kept once pushed to parents
                node.grad = None

    def zero_grad(self) -> None:
        self.grad = None

    # -- introspection --------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic -----------------------------------------

    def __add__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)

        def backward(g: np.ndarray) -> None:
            self.accumulate(g)
            other.accumulate(g)

        return Tensor.from_op(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor.from_op(-self.data, (self,), lambda g: self.accumulate(-g))

    def __sub__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)

        def backward(g: np.ndarray) -> None:
            self.accumulate(g)
            other.accumulate(-g)

        return Tensor.from_op(self.data - other.data, (self, other), backward)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)

        def backward(g: np.ndarray) -> None:
            self.accumulate(g * other.data)
            other.accumulate(g * self.data)

        return Tensor.from_op(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)

        def backward(g: np.ndarray) -> None:
            self.accumulate(g / other.data)
            other.accumulate(-g * self.data / (other.data ** 2))

        return Tensor.from_op(self.data / other.data, (self, other), backward)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return self.matmul(other)

    def matmul(self, other: "Tensor") -> "Tensor":
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(f"matmul inner dims differ: {self.shape} @ {other.shape}")

        def backward(g: np.ndarray) -> None:
            self.accumulate(g @ np.swapaxes(other.data, -1, -2))
            other.accumulate(np.swapaxes(self.data, -1, -2) @ g)

        return Tensor.from_op(self.data @ other.data, (self, other), backward)

    def abs(self) -> "Tensor":
        note_branch(self.data > 0)
        return Tensor.from_op(np.abs(self.data), (self,), lambda g: self.accumulate(g * np.sign(self.data)))

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return Tensor.from_op(out_data, (self,), lambda g: self.accumulate(g * out_data))

    def log(self) -> "Tensor":
        return Tensor.from_op(np.log(self.data), (self,), lambda g: self.accumulate(g / self.data))

    # -- reductions -----------------------------------------------------

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        shape = self.data.shape

        def backward(g: np.ndarray) -> None:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self.accumulate(np.broadcast_to(g, shape))

        return Tensor.from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape manipulation ---------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.data.shape
        return Tensor.from_op(self.data.reshape(shape), (self,), lambda g: self.accumulate(g.reshape(original)))

    def transpose(self, *axes: int) -> "Tensor":
        axes = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor.from_op(self.data.transpose(axes), (self,), lambda g: self.accumulate(g.transpose(inverse)))

    def __getitem__(self, index) -> "Tensor":
        shape = self.data.shape

        def backward(g: np.ndarray) -> None:
            full = np.zeros(shape)
            np.add.at(full, index, g)
            self.accumulate(full)

        return Tensor.from_op(self.data[index], (self,), backward)

    def rearrange(self, pattern: str, **axes_lengths: int) -> "Tensor":
        """einops rearrangement; ``axes_lengths`` must also determine the inverse pattern."""
        left, right = (side.strip() for side in pattern.split("->"))
        inverse = f"{right} -> {left}"
        out_data = einops.rearrange(self.data, pattern, **axes_lengths)
        return Tensor.from_op(
            out_data,
            (self,),
            lambda g: self.accumulate(einops.rearrange(g, inverse, **axes_lengths)),
        )


class Parameter(Tensor):
    """Trainable leaf tensor with a unique name and an optional momentum buffer."""

    def __init__(self, data: ArrayLike, name: str):
        super().__init__(data, requires_grad=True, name=name)
        self.momentum_buffer: Optional[np.ndarray] = None

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def _topological_order(root: Tensor) -> list:
    order: list = []
    visited: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order
