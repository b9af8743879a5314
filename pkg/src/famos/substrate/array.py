"""Reverse-mode differentiable arrays.

The engine is deliberately small: float32 arrays of fixed rank 4
(batch, channels, height, width), an implicit tape built through parent
links, and only the operations the mosaic networks actually need.
Every backward rule is checked against central finite differences in
the test suite.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "DiffArray",
    "ShapeError",
    "SubstrateError",
    "abs_",
    "backward",
    "clip",
    "concat",
    "exp",
    "grad_enabled",
    "leaky_relu",
    "log",
    "make_op",
    "mean_all",
    "narrow",
    "no_grad",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "sigmoid",
    "sqrt",
    "sum_all",
    "tanh",
    "activation",
]


class SubstrateError(ValueError):
    """Contract violation inside the array engine."""


class ShapeError(SubstrateError):
    """Operand shapes cannot be combined."""


_GRAD_ENABLED = True

# Cumulative float32 elements allocated through DiffArray construction.
# Inference uses this to verify per-chunk working-set bounds.
_ALLOC_COUNT = [0]


def alloc_count() -> int:
    return _ALLOC_COUNT[0]


def reset_alloc_count() -> None:
    _ALLOC_COUNT[0] = 0


class no_grad:
    """Context manager that suspends graph construction."""

    def __enter__(self) -> "no_grad":
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class DiffArray:
    """Rank-4 float32 array with a same-shape gradient accumulator.

    Axes are (batch, channels, height, width). Results of operations
    keep references to their parents plus a gradient closure; calling
    ``backward`` on a scalar walks the graph once in reverse
    topological order. Gradients accumulate additively until reset.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"DiffArray must have rank 4, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        # Leaves created with requires_grad get an eager all-zero
        # accumulator; intermediate nodes allocate lazily in backward.
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[DiffArray, ...] = ()
        self._grad_fn = None
        _ALLOC_COUNT[0] += arr.size

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0
        elif self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def detach(self) -> "DiffArray":
        return DiffArray(self.values.copy())

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def __repr__(self) -> str:
        flags = "grad" if self.requires_grad else "const"
        return f"DiffArray(shape={self.shape}, {flags})"


def make_op(values: np.ndarray, parents: tuple[DiffArray, ...], grad_fn) -> DiffArray:
    """Create a graph node. grad_fn(g) returns one array (or None) per parent.

    Returned parent gradients must be freshly allocated arrays; views
    into shared storage would corrupt accumulation.
    """
    out = DiffArray(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _coerce(x) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim > 4:
        raise ShapeError(f"cannot coerce rank-{arr.ndim} value into a DiffArray")
    arr = arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
    return DiffArray(arr)


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back down to the operand shape."""
    if g.shape == shape:
        return g.copy()
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True).astype(np.float32)


# -- arithmetic --------------------------------------------------------


def add(a, b) -> DiffArray:
    a, b = _coerce(a), _coerce(b)
    out = a.values + b.values

    def grad_fn(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return make_op(out, (a, b), grad_fn)


def sub(a, b) -> DiffArray:
    a, b = _coerce(a), _coerce(b)
    out = a.values - b.values

    def grad_fn(g):
        return _sum_to(g, a.shape), _sum_to(-g, b.shape)

    return make_op(out, (a, b), grad_fn)


def mul(a, b) -> DiffArray:
    a, b = _coerce(a), _coerce(b)
    out = a.values * b.values

    def grad_fn(g):
        return _sum_to(g * b.values, a.shape), _sum_to(g * a.values, b.shape)

    return make_op(out, (a, b), grad_fn)


def div(a, b) -> DiffArray:
    a, b = _coerce(a), _coerce(b)
    out = a.values / b.values

    def grad_fn(g):
        ga = _sum_to(g / b.values, a.shape)
        gb = _sum_to(-g * a.values / (b.values * b.values), b.shape)
        return ga, gb

    return make_op(out, (a, b), grad_fn)


def log(x: DiffArray) -> DiffArray:
    x = _coerce(x)
    out = np.log(x.values)

    def grad_fn(g):
        return (g / x.values,)

    return make_op(out, (x,), grad_fn)


def exp(x: DiffArray) -> DiffArray:
    x = _coerce(x)
    out = np.exp(x.values)

    def grad_fn(g):
        return (g * out,)

    return make_op(out, (x,), grad_fn)


def sqrt(x: DiffArray) -> DiffArray:
    x = _coerce(x)
    out = np.sqrt(x.values)

    def grad_fn(g):
        return (g * (0.5 / out),)

    return make_op(out, (x,), grad_fn)


def abs_(x: DiffArray) -> DiffArray:
    x = _coerce(x)
    out = np.abs(x.values)

    def grad_fn(g):
        return (g * np.sign(x.values),)

    return make_op(out, (x,), grad_fn)


def clip(x: DiffArray, lo: float, hi: float) -> DiffArray:
    """Clamp values to [lo, hi]; gradient is zero outside the range."""
    x = _coerce(x)
    out = np.clip(x.values, lo, hi)

    def grad_fn(g):
        inside = (x.values >= lo) & (x.values <= hi)
        return ((g * inside).astype(np.float32),)

    return make_op(out, (x,), grad_fn)


# -- activations -------------------------------------------------------


def relu(x: DiffArray) -> DiffArray:
    x = _coerce(x)
    out = np.maximum(x.values, 0.0)

    def grad_fn(g):
        return ((g * (x.values > 0)).astype(np.float32),)

    return make_op(out, (x,), grad_fn)


def leaky_relu(x: DiffArray, slope: float = 0.2) -> DiffArray:
    x = _coerce(x)
    out = np.where(x.values > 0, x.values, np.float32(slope) * x.values)

    def grad_fn(g):
        return (np.where(x.values > 0, g, np.float32(slope) * g),)

    return make_op(out, (x,), grad_fn)


def sigmoid(x: DiffArray) -> DiffArray:
    x = _coerce(x)
    # Branch on sign so exp never overflows in float32.
    v = x.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return make_op(out, (x,), grad_fn)


def tanh(x: DiffArray) -> DiffArray:
    x = _coerce(x)
    out = np.tanh(x.values)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return make_op(out, (x,), grad_fn)


_ACTIVATIONS = {
    "relu": lambda x, slope: relu(x),
    "leaky_relu": lambda x, slope: leaky_relu(x, slope),
    "sigmoid": lambda x, slope: sigmoid(x),
    "tanh": lambda x, slope: tanh(x),
}


def activation(x: DiffArray, kind: str, slope: float = 0.2) -> DiffArray:
    """Apply an elementwise nonlinearity by name."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise SubstrateError(
            f"unknown activation '{kind}', expected one of {sorted(_ACTIVATIONS)}"
        ) from None
    return fn(x, slope)


# -- reductions --------------------------------------------------------


def reduce_sum(x: DiffArray, axes: tuple[int, ...]) -> DiffArray:
    """Sum over the given axes, keeping dims so rank stays 4."""
    x = _coerce(x)
    out = x.values.sum(axis=axes, keepdims=True)

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).astype(np.float32).copy(),)

    return make_op(out, (x,), grad_fn)


def reduce_mean(x: DiffArray, axes: tuple[int, ...]) -> DiffArray:
    x = _coerce(x)
    n = 1
    for ax in axes:
        n *= x.shape[ax]
    out = x.values.mean(axis=axes, keepdims=True, dtype=np.float32)

    def grad_fn(g):
        scaled = g * np.float32(1.0 / n)
        return (np.broadcast_to(scaled, x.shape).astype(np.float32).copy(),)

    return make_op(out, (x,), grad_fn)


def sum_all(x: DiffArray) -> DiffArray:
    return reduce_sum(x, (0, 1, 2, 3))


def mean_all(x: DiffArray) -> DiffArray:
    return reduce_mean(x, (0, 1, 2, 3))


# -- structure ---------------------------------------------------------


def narrow(x: DiffArray, axis: int, start: int, length: int) -> DiffArray:
    """Contiguous slice along one axis."""
    x = _coerce(x)
    if not 0 <= axis < 4:
        raise ShapeError(f"narrow axis must be in [0, 4), got {axis}")
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow window [{start}, {start + length}) outside axis {axis} "
            f"of shape {x.shape}"
        )
    idx = [slice(None)] * 4
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.values[idx].copy()

    def grad_fn(g):
        gx = np.zeros_like(x.values)
        gx[idx] = g
        return (gx,)

    return make_op(out, (x,), grad_fn)


def concat(parts: list[DiffArray], axis: int = 1) -> DiffArray:
    """Concatenate along one axis; gradient splits back by offsets."""
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one operand")
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def grad_fn(g):
        grads = []
        offset = 0
        for n in sizes:
            idx = [slice(None)] * 4
            idx[axis] = slice(offset, offset + n)
            grads.append(g[tuple(idx)].copy())
            offset += n
        return tuple(grads)

    return make_op(out, tuple(parts), grad_fn)


# -- backward ----------------------------------------------------------


def backward(loss: DiffArray) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad.

    loss must be a scalar (all extents 1). Repeated calls without a
    gradient reset accumulate additively.
    """
    if loss.values.size != 1:
        raise SubstrateError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise SubstrateError("loss does not reach any parameter requiring gradients")

    # Reverse DFS post-order = topological order over consumer->input edges.
    topo: list[DiffArray] = []
    seen: set[int] = set()
    stack: list[tuple[DiffArray, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(topo):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.values)
            node.grad += g
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = pending.get(id(parent))
            if acc is None:
                pending[id(parent)] = pg
            else:
                acc += pg
