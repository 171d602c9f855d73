"""Reverse-mode automatic differentiation over numpy arrays.

Every backward rule is written with ``Tensor`` operations, so running
``grad(..., create_graph=True)`` records the backward pass as a graph of
its own and gradients of gradients come out of a second call. This is
what the Eikonal and normal losses need (they contain the input gradient
of the network) and what feature-vertex learning needs (the input
gradient also depends on the feature geometry).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def set_grad_enabled(enabled: bool):
    previous = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = previous


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Optional[Callable[["Tensor"], tuple]] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def leaf(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


# -- shape plumbing -----------------------------------------------------------


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast result back down to ``shape``."""
    if x.shape == tuple(shape):
        return x
    ndiff = x.ndim - len(shape)
    axes = tuple(range(ndiff)) + tuple(
        i + ndiff for i, n in enumerate(shape) if n == 1 and x.shape[i + ndiff] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True) if axes else x.data
    data = data.reshape(shape)
    return _make(data, (x,), lambda g: (broadcast_to(g, x.shape),))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if x.shape == tuple(shape):
        return x
    data = np.broadcast_to(x.data, shape).copy()
    return _make(data, (x,), lambda g: (sum_to(g, x.shape),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)
    return _make(data, (x,), lambda g: (reshape(g, x.shape),))


def transpose(x: Tensor) -> Tensor:
    return _make(x.data.T.copy(), (x,), lambda g: (transpose(g),))


def getitem(x: Tensor, key) -> Tensor:
    data = x.data[key]
    return _make(np.array(data), (x,), lambda g: (scatter(g, key, x.shape),))


def scatter(x: Tensor, key, shape: tuple[int, ...]) -> Tensor:
    """Adjoint of ``getitem``: place ``x`` into zeros of ``shape`` at ``key``."""
    data = np.zeros(shape)
    np.add.at(data, key, x.data)
    return _make(data, (x,), lambda g: (getitem(g, key),))


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``x[index]`` along the first axis."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    return _make(x.data[index], (x,), lambda g: (segment_sum(g, index, n),))


def segment_sum(x: Tensor, index: np.ndarray, n: int) -> Tensor:
    """Rows of ``x`` summed into ``n`` buckets given by ``index``."""
    index = np.asarray(index, dtype=np.int64)
    data = np.zeros((n,) + x.shape[1:])
    np.add.at(data, index, x.data)
    return _make(data, (x,), lambda g: (take(g, index),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g: Tensor):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            key = [slice(None)] * data.ndim
            key[ax] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(key)))
        return tuple(out)

    return _make(data, tuple(tensors), backward)


def stack_columns(columns: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped 1-D tensors as the columns of a 2-D tensor."""
    return concat([reshape(as_tensor(c), (-1, 1)) for c in columns], axis=1)


# -- arithmetic ---------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: Tensor):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: Tensor):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(neg(g), b.shape) if b.requires_grad else None,
        )

    return _make(a.data - b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: Tensor):
        return (
            sum_to(mul(g, b), a.shape) if a.requires_grad else None,
            sum_to(mul(g, a), b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: Tensor):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    return _make(
        a.data**exponent,
        (a,),
        lambda g: (mul(g, mul(exponent, power(a, exponent - 1.0))),),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: Tensor):
        return (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        )

    return _make(a.data @ b.data, (a, b), backward)


# -- elementwise functions ----------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (mul(g, exp(a)),))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a: Tensor) -> Tensor:
    return _make(np.sqrt(a.data), (a,), lambda g: (div(g, mul(2.0, sqrt(a))),))


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),))


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (neg(mul(g, sin(a))),))


def abs(a: Tensor) -> Tensor:
    # sign(0) is taken as +1: derivatives at a kink are the limits from the
    # positive side.
    sign = np.where(a.data >= 0.0, 1.0, -1.0)
    return _make(np.abs(a.data), (a,), lambda g: (mul(g, sign),))


def atan2(y: ArrayLike, x: ArrayLike) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)

    def backward(g: Tensor):
        r2 = add(mul(x, x), mul(y, y))
        return (
            sum_to(div(mul(g, x), r2), y.shape) if y.requires_grad else None,
            sum_to(neg(div(mul(g, y), r2)), x.shape) if x.requires_grad else None,
        )

    return _make(np.arctan2(y.data, x.data), (y, x), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g: Tensor):
        s = sigmoid(a)
        return (mul(g, mul(s, sub(1.0, s))),)

    return _make(data, (a,), backward)


def softplus(a: Tensor, beta: float = 1.0) -> Tensor:
    """``log(1 + exp(beta * a)) / beta`` with a linear branch above ``beta*a > 20``."""
    z = beta * a.data
    data = np.where(z > 20.0, a.data, np.log1p(np.exp(np.minimum(z, 20.0))) / beta)
    return _make(data, (a,), lambda g: (mul(g, sigmoid(mul(beta, a))),))


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0.0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (mul(g, mask),))


def where(cond: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else from ``b``.

    ``cond`` is a constant. Both branches must be finite everywhere,
    including where they are not selected, or their zero gradient turns
    into ``0 * inf``.
    """
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    keep_a = cond.astype(np.float64)
    keep_b = 1.0 - keep_a
    def backward(g: Tensor):
        return (
            sum_to(mul(g, keep_a), a.shape) if a.requires_grad else None,
            sum_to(mul(g, keep_b), b.shape) if b.requires_grad else None,
        )

    return _make(np.where(cond, a.data, b.data), (a, b), backward)


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Tensor):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            shape = list(a.shape)
            for ax in axes:
                shape[ax % a.ndim] = 1
            g = reshape(g, tuple(shape))
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)

    return _make(np.asarray(data), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return div(tsum(a, axis, keepdims), float(max(count, 1)))


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise dot product of two ``(N, d)`` tensors."""
    return tsum(mul(a, b), axis=1)


def norm_rows(a: Tensor) -> Tensor:
    return sqrt(dot_rows(a, a))


def cross_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cross product of two ``(N, 3)`` tensors."""
    ax, ay, az = a[:, 0], a[:, 1], a[:, 2]
    bx, by, bz = b[:, 0], b[:, 1], b[:, 2]
    return stack_columns([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx])


# -- graph traversal ----------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    grad_output: Optional[ArrayLike] = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` with respect to each of ``inputs``.

    Inputs the output does not depend on get zeros. With ``create_graph``
    the returned gradients carry their own graph and can be differentiated
    again.
    """
    inputs = list(inputs)
    if grad_output is None:
        seed = Tensor(np.ones_like(output.data))
    else:
        seed = as_tensor(grad_output)

    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        grads[id(output)] = seed
        with set_grad_enabled(create_graph):
            for node in reversed(_topological_order(output)):
                g = grads.get(id(node))
                if g is None or node._backward is None:
                    continue
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else add(grads[key], pg)
                if all(id(node) != id(t) for t in inputs):
                    del grads[id(node)]

    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out
