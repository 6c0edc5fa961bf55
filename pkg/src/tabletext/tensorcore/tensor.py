"""Dense float64 arrays with reverse-mode automatic differentiation.

Every differentiable quantity in the package is a Tensor. Ops build a tape
while gradients are enabled; Tensor.backward walks the tape once in reverse
topological order. Only float64 is supported.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = [True]


def grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


class no_grad:
    """Context manager that disables tape construction (inference mode)."""

    def __enter__(self) -> None:
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc) -> bool:
        _GRAD_ENABLED[0] = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Propagate gradients to every reachable requires_grad leaf.

        Iterative topological walk; each node's rule runs exactly once.
        The default seed is all-ones (identity for scalar losses).
        """
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ValueError(
                    f"seed shape {seed.shape} does not match tensor shape {self.data.shape}"
                )
        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # Operator sugar. Scalars and ndarrays are wrapped as constants.
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not provided; multiply by a reciprocal")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the given (broadcast-source) shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} are incompatible"
        ) from None


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = astensor(a)

    def backward(g, a=a):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with optional stacked leading batch dimensions."""
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires ndim >= 2, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not align")
    out_data = np.matmul(a.data, b.data)

    def backward(g, a=a, b=b):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if ga.shape != a.data.shape:
                ga = _unbroadcast(ga, a.data.shape)
            a._accumulate(ga)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if gb.shape != b.data.shape:
                gb = _unbroadcast(gb, b.data.shape)
            b._accumulate(gb)

    return _make(out_data, (a, b), backward)


def relu(a) -> Tensor:
    a = astensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g, a=a):
        a._accumulate(g * (a.data > 0.0))

    return _make(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = astensor(a)
    out_data = np.tanh(a.data)

    def backward(g, a=a, out_data=out_data):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = astensor(a)
    # the tanh form is exact and overflow-free at both tails
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g, a=a, out_data=out_data):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = astensor(a)
    out_data = np.exp(a.data)

    def backward(g, a=a, out_data=out_data):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = astensor(a)
    out_data = np.log(a.data)

    def backward(g, a=a):
        a._accumulate(g / a.data)

    return _make(out_data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    a = astensor(a)
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def backward(g, a=a):
        a._accumulate(g * 0.5 * (1.0 + np.tanh(0.5 * a.data)))

    return _make(out_data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g, a=a, out_data=out_data, axis=axis):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - inner))

    return _make(out_data, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g, a=a, out_data=out_data, axis=axis):
        a._accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, a=a, axis=axis, keepdims=keepdims):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def mean_pool(a, axis: int = 0, keepdims: bool = False) -> Tensor:
    """Arithmetic mean along one axis."""
    a = astensor(a)
    n = a.data.shape[axis]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g, a=a, axis=axis, keepdims=keepdims, n=n):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / n, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    parts = [astensor(t) for t in tensors]
    if not parts:
        raise ValueError("concat of an empty sequence")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g, parts=parts, offsets=offsets, axis=axis):
        pieces = np.split(g, offsets, axis=axis)
        for p, piece in zip(parts, pieces):
            if p.requires_grad:
                p._accumulate(piece)

    return _make(out_data, tuple(parts), backward)


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    out_data = a.data.reshape(shape)

    def backward(g, a=a):
        a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def transpose_axes(a, axes) -> Tensor:
    a = astensor(a)
    out_data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward(g, a=a, inverse=inverse):
        a._accumulate(np.transpose(g, inverse))

    return _make(out_data, (a,), backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = astensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out_data = a.data[index]

    def backward(g, a=a, index=index):
        full = np.zeros_like(a.data)
        full[index] = g
        a._accumulate(full)

    return _make(out_data, (a,), backward)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of a 2D table by integer id; ids may have any shape."""
    table = astensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ValueError(f"embedding_lookup table must be 2D, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.data.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    out_data = table.data[ids]

    def backward(g, table=table, ids=ids):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table._accumulate(gt)

    return _make(out_data, (table,), backward)


def gather_rows(a, index) -> Tensor:
    """Select rows of a 2D tensor; duplicate indices are allowed."""
    a = astensor(a)
    index = np.asarray(index)
    out_data = a.data[index]

    def backward(g, a=a, index=index):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        a._accumulate(ga)

    return _make(out_data, (a,), backward)


def scatter_rows(a, index, num_rows: int) -> Tensor:
    """Place the rows of a 2D tensor at the given unique positions of a zero
    (num_rows, d) tensor."""
    a = astensor(a)
    index = np.asarray(index)
    if len(np.unique(index)) != len(index):
        raise ValueError("scatter_rows requires unique row indices")
    out_data = np.zeros((num_rows, a.data.shape[1]), dtype=np.float64)
    out_data[index] = a.data

    def backward(g, a=a, index=index):
        a._accumulate(g[index])

    return _make(out_data, (a,), backward)


def pick(a, index) -> Tensor:
    """Per-row element selection: out[i] = a[i, index[i]] for a 2D tensor."""
    a = astensor(a)
    index = np.asarray(index)
    rows = np.arange(a.data.shape[0])
    out_data = a.data[rows, index]

    def backward(g, a=a, index=index, rows=rows):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, index), g)
        a._accumulate(ga)

    return _make(out_data, (a,), backward)


LAYER_NORM_EPS = 1e-6


def layer_norm(a, gain, bias) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = astensor(a), astensor(gain), astensor(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (a.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g, a=a, gain=gain, bias=bias, xhat=xhat, inv=inv):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))
        if a.requires_grad:
            gx = g * gain.data
            mean_gx = gx.mean(axis=-1, keepdims=True)
            mean_gx_xhat = (gx * xhat).mean(axis=-1, keepdims=True)
            a._accumulate((gx - mean_gx - xhat * mean_gx_xhat) * inv)

    return _make(out_data, (a, gain, bias), backward)


def dropout(a, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    a = astensor(a)
    if not training or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout in training mode requires an rng")
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    out_data = a.data * mask

    def backward(g, a=a, mask=mask):
        a._accumulate(g * mask)

    return _make(out_data, (a,), backward)
