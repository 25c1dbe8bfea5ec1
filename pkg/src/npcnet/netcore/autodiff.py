"""A small reverse-mode differentiation engine over numpy arrays.

Every operation returns a :class:`Tensor` that remembers its parents and a
closure propagating the upstream gradient back to them.  ``backward`` walks the
graph once in reverse topological order.  Gradients accumulate across calls
until :meth:`Tensor.zero_grad` is invoked.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """Raised when a forward pass produces non-finite values."""


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        op: str = "leaf",
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(op={self.op}, shape={self.value.shape})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``.grad`` on every tensor that requires it.

        Only scalar outputs can be differentiated.  Intermediate gradients are
        discarded after the pass; leaf gradients accumulate.
        """
        if self.value.size != 1 or self.value.ndim > 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.value.shape}")
        order = _topological_order(self)
        upstream: dict[int, np.ndarray] = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node._accumulate(g)
                continue
            for parent, pg in node.backward_fn(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in upstream:
                    upstream[key] = upstream[key] + pg
                else:
                    upstream[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def Parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


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
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(value, parents, backward_fn, op) -> Tensor:
    return Tensor(value, parents=parents, backward_fn=backward_fn, op=op)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(a.value + b.value, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(a.value - b.value, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return (
            (a, _unbroadcast(g * b.value, a.shape)),
            (b, _unbroadcast(g * a.value, b.shape)),
        )

    return _make(a.value * b.value, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def back(g):
        return (
            (a, _unbroadcast(g / b.value, a.shape)),
            (b, _unbroadcast(-g * out / b.value, b.shape)),
        )

    return _make(out, (a, b), back, "div")


def matmul(a, b) -> Tensor:
    """Matrix product for 2-D operands (a 1-D left operand is treated as a row)."""
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        av = a.value if a.ndim > 1 else a.value[None, :]
        gg = g if g.ndim > 1 else g[None, :]
        ga = gg @ b.value.T
        if a.ndim == 1:
            ga = ga[0]
        return ((a, ga), (b, av.T @ gg))

    return _make(a.value @ b.value, (a, b), back, "matmul")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: ((a, g * (1.0 - out * out)),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: ((a, g * mask),), "relu")


def identity(a: Tensor) -> Tensor:
    return a


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.value), (a,), lambda g: ((a, g / a.value),), "log")


def sqrt(a: Tensor) -> Tensor:
    """Square root with a zero subgradient at 0 (distances between coincident points)."""
    out = np.sqrt(a.value)

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        return ((a, np.where(out > 0, g / (2.0 * safe), 0.0)),)

    return _make(out, (a,), back, "sqrt")


def power(a: Tensor, exponent: float) -> Tensor:
    out = np.power(a.value, exponent)

    def back(g):
        if exponent == 0:
            return ((a, np.zeros_like(a.value)),)
        return ((a, g * exponent * np.power(a.value, exponent - 1.0)),)

    return _make(out, (a,), back, "power")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: ((a, g * inside),), "clip")


def maximum(a: Tensor, floor: float = 0.0) -> Tensor:
    """Elementwise ``max(a, floor)``; the gradient at the tie is taken as 0."""
    mask = a.value > floor
    return _make(np.where(mask, a.value, floor), (a,), lambda g: ((a, g * mask),), "max")


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _make(out, (a,), back, "sum")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / max(n, 1))


def squared_norm(a: Tensor, axis: int = -1) -> Tensor:
    """Sum of squares along ``axis``."""
    return sum(mul(a, a), axis=axis)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return ((a, out * (g - (g * out).sum(axis=axis, keepdims=True))),)

    return _make(out, (a,), back, "softmax")


def gather(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; gradients scatter-add into the selected rows."""
    idx = np.asarray(indices, dtype=np.int64)
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"lookup index out of range for table with {n_rows} rows")

    def back(g):
        full = np.zeros_like(table.value)
        np.add.at(full, idx, g)
        return ((table, full),)

    return _make(table.value[idx], (table,), back, "gather")


def take(a: Tensor, index) -> Tensor:
    """Basic/advanced indexing with scatter-add backward."""

    def back(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return ((a, full),)

    return _make(a.value[index], (a,), back, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append((t, g[tuple(sl)]))
        return out

    return _make(np.concatenate([t.value for t in tensors], axis=axis), tensors, back, "concat")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.value.reshape(shape), (a,), lambda g: ((a, g.reshape(a.shape)),), "reshape")


def expand_rows(a: Tensor, n: int) -> Tensor:
    """Broadcast a ``(..., d)`` tensor to ``(..., n, d)`` by inserting an axis."""
    out = np.repeat(np.expand_dims(a.value, -2), n, axis=-2)
    return _make(out, (a,), lambda g: ((a, g.sum(axis=-2)),), "expand_rows")


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.value)):
        raise NumericError(f"non-finite values produced at {where}")
    return t


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": tanh,
    "relu": relu,
    "identity": identity,
}
