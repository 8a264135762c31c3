"""Dense float tensors with a recorded reverse-mode differentiation graph.

A :class:`Tensor` wraps a contiguous row-major numpy buffer (float64 by
default, float32 selectable).  Operations on tensors that require gradients
record their inputs together with one vector-Jacobian closure per input, so a
scalar value can be pulled back through any composition with
:func:`backprop`.  Tensors are treated as immutable once they participate in
a recorded graph.

Broadcasting is deliberately narrow: binary operations accept two operands of
identical shape, or one operand with a single element.  Anything wider must go
through an explicit expansion op (:func:`expand_over`), which keeps every
gradient rule a one-liner.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

Array = np.ndarray
DEFAULT_DTYPE = np.float64


def _contiguous(arr: Array) -> Array:
    # np.ascontiguousarray silently promotes 0-d to 1-d; keep scalars 0-d
    if arr.ndim == 0:
        return arr
    return np.ascontiguousarray(arr)


class Tensor:
    """Rank <= 4 dense float array, optionally part of a differentiation graph.

    A tensor with recorded ``parents`` acts as the differentiation node for
    the operation that produced it; leaves have no parents.  ``requires_grad``
    marks leaves that should receive gradients and is propagated to every
    value computed from them.
    """

    __slots__ = ("data", "requires_grad", "parents", "vjps")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: Array = _contiguous(arr)
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.vjps: tuple[Callable[[Array], Array], ...] = ()

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
        return not self.parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        """The underlying buffer; callers must not write to it."""
        return self.data

    def detach(self) -> "Tensor":
        """Same values, cut loose from the recorded graph."""
        return Tensor(self.data.copy(), dtype=self.dtype)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axes=None) -> "Tensor":
        return reduce_sum(self, axes)

    def mean(self, axes=None) -> "Tensor":
        return reduce_mean(self, axes)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{grad})"


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Coerce a scalar or array to a constant tensor (dtype taken from `like`)."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=True)


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def eye(n: int, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.eye(n, dtype=dtype))


def _record(data: Array, parents: Sequence[Tensor], vjps: Sequence[Callable[[Array], Array]]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(np.asarray(data))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjps = tuple(vjps)
    else:
        out.requires_grad = False
        out.parents = ()
        out.vjps = ()
    return out


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise DimensionError(
        f"{op}: shapes {a.data.shape} and {b.data.shape} are neither equal "
        "nor scalar-vs-tensor"
    )


def _shrink(g: Array, ref: Array) -> Array:
    """Reduce an output gradient back to the shape of a (possibly scalar) operand."""
    if g.shape == ref.shape:
        return g
    return np.asarray(g, dtype=ref.dtype).sum().reshape(ref.shape)


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_binary(a, b, "add")
    return _record(a.data + b.data, (a, b),
                   (lambda g: _shrink(g, a.data), lambda g: _shrink(g, b.data)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_binary(a, b, "sub")
    return _record(a.data - b.data, (a, b),
                   (lambda g: _shrink(g, a.data), lambda g: _shrink(-g, b.data)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_binary(a, b, "mul")
    return _record(a.data * b.data, (a, b),
                   (lambda g: _shrink(g * b.data, a.data),
                    lambda g: _shrink(g * a.data, b.data)))


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_binary(a, b, "div")
    return _record(a.data / b.data, (a, b),
                   (lambda g: _shrink(g / b.data, a.data),
                    lambda g: _shrink(-g * a.data / (b.data * b.data), b.data)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), (lambda g: -g,))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a plain python scalar (kept out of the graph)."""
    factor = float(factor)
    return _record(a.data * factor, (a,), (lambda g: g * factor,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _record(np.abs(a.data), (a,), (lambda g: g * sign,))


def sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)
    return _record(root, (a,), (lambda g: g / (2.0 * root),))


def maximum(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_binary(a, b, "maximum")
    take_a = a.data >= b.data  # ties route to the first operand
    return _record(np.where(take_a, a.data, b.data), (a, b),
                   (lambda g: _shrink(g * take_a, a.data),
                    lambda g: _shrink(g * ~take_a, b.data)))


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return _record(a.data @ b.data, (a, b),
                   (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a rank-2 tensor, got {a.shape}")
    return _record(a.data.T, (a,), (lambda g: g.T,))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), (lambda g: g.transpose(inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    return _record(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),))


def trace(a: Tensor) -> Tensor:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"trace expects a square matrix, got {a.shape}")
    n = a.shape[0]
    return _record(np.trace(a.data).reshape(()), (a,),
                   (lambda g: float(g) * np.eye(n, dtype=a.dtype),))


# -- shape surgery ---------------------------------------------------------

def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.data.shape[axis] for p in parts])

    def make_vjp(i):
        lo, hi = bounds[i], bounds[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _record(data, parts, [make_vjp(i) for i in range(len(parts))])


def take_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return full

    return _record(a.data[start:stop], (a,), (vjp,))


def take_columns(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"take_columns expects a rank-2 tensor, got {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return full

    return _record(a.data[:, start:stop], (a,), (vjp,))


def take_flat(a: Tensor, indices: Array) -> Tensor:
    """Gather from the flattened buffer; repeated indices scatter-add on the way back."""
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= a.size):
        raise DimensionError("take_flat index out of range")

    def vjp(g):
        full = np.zeros(a.data.size, dtype=a.dtype)
        np.add.at(full, indices.reshape(-1), g.reshape(-1))
        return full.reshape(a.data.shape)

    return _record(a.data.reshape(-1)[indices], (a,), (vjp,))


def pad_spatial(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the trailing spatial axes of an (N,C,L) or (N,C,H,W) tensor."""
    if pad < 0:
        raise ContractError("pad must be >= 0")
    if a.ndim == 3:
        widths = ((0, 0), (0, 0), (pad, pad))
        inner = (slice(None), slice(None), slice(pad, a.shape[2] + pad))
    elif a.ndim == 4:
        widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
        inner = (slice(None), slice(None),
                 slice(pad, a.shape[2] + pad), slice(pad, a.shape[3] + pad))
    else:
        raise DimensionError(f"pad_spatial expects rank 3 or 4, got {a.shape}")
    if pad == 0:
        return _record(a.data, (a,), (lambda g: g,))
    return _record(np.pad(a.data, widths), (a,), (lambda g: g[inner],))


# -- reductions and expansions ----------------------------------------------

def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.ndim)
    kept = a.data.sum(axis=axes)
    shape = a.data.shape

    def vjp(g):
        expanded = np.expand_dims(g, axes) if axes else g
        return np.broadcast_to(expanded, shape).astype(a.dtype, copy=False)

    return _record(kept, (a,), (vjp,))


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes])) if axes else 1
    kept = a.data.mean(axis=axes)
    shape = a.data.shape

    def vjp(g):
        expanded = np.expand_dims(g, axes) if axes else g
        return np.broadcast_to(expanded, shape).astype(a.dtype, copy=False) / count

    return _record(kept, (a,), (vjp,))


def expand_over(v: Tensor, shape, axes) -> Tensor:
    """Broadcast `v` to `shape` by inserting the given axes (inverse of a reduction)."""
    shape = tuple(shape)
    axes = _normalize_axes(axes, len(shape))
    reduced = tuple(s for i, s in enumerate(shape) if i not in axes)
    if v.shape != reduced:
        raise DimensionError(f"expand_over: {v.shape} does not reduce from {shape} over {axes}")

    def vjp(g):
        return g.sum(axis=axes)

    return _record(np.broadcast_to(np.expand_dims(v.data, axes), shape), (v,), (vjp,))


def amax(a: Tensor) -> Tensor:
    flat_index = int(np.argmax(a.data))
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(a.data.size, dtype=a.dtype)
        full[flat_index] = float(g)
        return full.reshape(shape)

    return _record(a.data.max().reshape(()), (a,), (vjp,))


# -- spec-named convenience ops ---------------------------------------------

def mean(a: Tensor) -> Tensor:
    return reduce_mean(a, None)


def variance(a: Tensor) -> Tensor:
    """Population variance over all elements."""
    centered = sub(a, mean(a))
    return mean(mul(centered, centered))


def l1mean(a: Tensor) -> Tensor:
    """Mean absolute value, E(|x|)."""
    return mean(absolute(a))


def sample_mean(a: Tensor) -> Tensor:
    """Per-sample mean over all non-batch axes; shape (N,)."""
    if a.ndim < 2:
        raise DimensionError("sample_mean expects a batch dimension plus features")
    return reduce_mean(a, tuple(range(1, a.ndim)))


# -- reverse-mode differentiation ---------------------------------------------

class GradientMap(dict):
    """Maps leaf tensors to their gradients; unreachable leaves read as zeros."""

    def __missing__(self, key: Tensor) -> Tensor:
        return Tensor(np.zeros_like(key.data))


def backprop(root: Tensor) -> GradientMap:
    """Pull the gradient of a scalar root back to every reachable leaf.

    Returns a :class:`GradientMap` from leaf tensors (``requires_grad`` and no
    parents) to gradient tensors of identical shape.
    """
    if root.data.size != 1:
        raise ContractError(f"backprop root must be scalar, got shape {root.shape}")

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

    grads: dict[int, Array] = {id(root): np.ones_like(root.data)}
    result = GradientMap()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                acc = result.get(node)
                result[node] = Tensor(g if acc is None else acc.data + g)
            continue
        for p, vjp in zip(node.parents, node.vjps):
            if not p.requires_grad:
                continue
            contribution = vjp(g)
            held = grads.get(id(p))
            grads[id(p)] = contribution if held is None else held + contribution
    return result
