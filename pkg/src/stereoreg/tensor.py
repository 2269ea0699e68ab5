"""Dense float tensors with reverse-mode automatic differentiation.

A Tensor wraps a C-contiguous (row-major, channels innermost) numpy array
together with the bookkeeping needed for backpropagation: the kind of
operation that produced it, references to its parent tensors, and a gradient
buffer that backward() fills in while replaying the graph in reverse
topological order.

Graphs are built eagerly by the op functions in this package. Ops are pure
from the caller's point of view; reductions delegate to numpy, whose
summation order is fixed for a given shape, so repeated runs are bit-stable.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

MAX_AXES = 5

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """N-dimensional float array plus autodiff record."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = ()):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        arr = np.ascontiguousarray(arr)
        if arr.ndim > MAX_AXES:
            raise ValueError(f"tensors support at most {MAX_AXES} axes, got {arr.ndim}")
        if any(n <= 0 for n in arr.shape):
            raise ValueError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self._backward = None  # callable(grad_out) set by the producing op

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self.op!r})"

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph.

        Gradients accumulate into .grad of every tensor with requires_grad
        set that lies on a path to this node. Raises if called on a
        non-scalar output.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.requires_grad and node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def abs(self) -> "Tensor":
        return absolute(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value: ArrayLike, dtype=None) -> Tensor:
    """Wrap a value as a constant Tensor (no-op on Tensor inputs)."""
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype if dtype is not None else np.float64)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _toposort(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def accumulate_grad(t: Tensor, g: np.ndarray, owned: bool) -> None:
    """Add g into t.grad.

    owned=False means g may alias a buffer shared with other consumers, so
    the first store copies it before any later in-place accumulation.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if owned else g.copy()
    else:
        t.grad += g


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise / reduction ops ---------------------------------------------


def add(a: Tensor, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad,
                 op="add", parents=(a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                ga = unbroadcast(g, a.data.shape)
                accumulate_grad(a, ga, owned=ga is not g)
            if b.requires_grad:
                gb = unbroadcast(g, b.data.shape)
                accumulate_grad(b, gb, owned=gb is not g)
        out._backward = _bw
    return out


def mul(a: Tensor, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad,
                 op="mul", parents=(a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                accumulate_grad(a, unbroadcast(g * b.data, a.data.shape), owned=True)
            if b.requires_grad:
                accumulate_grad(b, unbroadcast(g * a.data, b.data.shape), owned=True)
        out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, requires_grad=a.requires_grad, op="neg", parents=(a,))
    if out.requires_grad:
        def _bw(g):
            accumulate_grad(a, -g, owned=True)
        out._backward = _bw
    return out


def absolute(a: Tensor) -> Tensor:
    """Elementwise |x|; the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    out = Tensor(np.abs(a.data), requires_grad=a.requires_grad, op="abs", parents=(a,))
    if out.requires_grad:
        sign = np.sign(a.data)

        def _bw(g):
            accumulate_grad(a, g * sign, owned=True)
        out._backward = _bw
    return out


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    out = Tensor(out_data, requires_grad=a.requires_grad, op="sum", parents=(a,))
    if out.requires_grad:
        in_shape = a.data.shape

        def _bw(g):
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(g, axis=axis)
            accumulate_grad(a, np.broadcast_to(gg.reshape(gg.shape if axis is not None or keepdims else (1,) * len(in_shape)), in_shape), owned=False)
        out._backward = _bw
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad,
                 op="reshape", parents=(a,))
    if out.requires_grad:
        orig = a.data.shape

        def _bw(g):
            accumulate_grad(a, g.reshape(orig), owned=False)
        out._backward = _bw
    return out
