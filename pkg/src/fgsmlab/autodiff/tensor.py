"""Tensor type and the reverse-mode engine.

Every differentiable op is a :class:`Function` whose ``backward`` is written
in terms of other Tensor ops.  When ``grad(..., create_graph=True)`` is used
the backward pass is itself recorded, which is what makes input-gradient
penalties trainable.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "Function",
    "NonFiniteError",
    "grad",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "as_tensor",
    "op_counter",
]


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up in a forward or backward value."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class _OpCounter:
    """Counts recorded graph nodes per op kind (thread-local).

    Used by tests to check that second-order graphs are only built when a
    regularizer actually needs them.
    """

    def __init__(self):
        self.counts: dict[str, int] = {}
        self.recorded_in_backward = 0

    def reset(self):
        self.counts.clear()
        self.recorded_in_backward = 0


@contextmanager
def op_counter():
    counter = _OpCounter()
    prev = getattr(_state, "counter", None)
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {where}")


class Tensor:
    __slots__ = ("data", "requires_grad", "_ctx", "__weakref__")

    # keep numpy from hijacking reflected operators (ndarray * Tensor)
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._ctx: Function | None = None

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
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


class Function:
    """One recorded node of the graph.

    Subclasses implement ``forward`` on ndarrays and ``backward`` on Tensors.
    ``backward`` receives a ``needs`` mask so it can skip parents nobody
    asked gradients for.
    """

    check_finite = False
    parents: tuple = ()

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: Tensor, needs: tuple[bool, ...]):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        ctx = cls()
        tensors = []
        for x in inputs:
            tensors.append(x if isinstance(x, Tensor) else Tensor(x))
        out = ctx.forward(*(t.data for t in tensors), **kwargs)
        if cls.check_finite:
            _check_finite(out, cls.__name__)
        track = is_grad_enabled() and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=track)
        if track:
            ctx.parents = tuple(tensors)
            result._ctx = ctx
            counter = getattr(_state, "counter", None)
            if counter is not None:
                name = cls.__name__
                counter.counts[name] = counter.counts.get(name, 0) + 1
                if getattr(_state, "in_backward", False):
                    counter.recorded_in_backward += 1
        return result


def _toposort(root: Tensor, inputs: list[Tensor]) -> tuple[list[Tensor], set[int]]:
    """Nodes reachable from ``root`` in topological order (root last), plus
    the ids of nodes lying on some path to one of ``inputs``."""
    input_ids = {id(t) for t in inputs}
    order: list[Tensor] = []
    visited: set[int] = set()
    reaches: dict[int, bool] = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        nid = id(node)
        if expanded:
            hit = nid in input_ids
            if node._ctx is not None:
                for p in node._ctx.parents:
                    if reaches.get(id(p), False):
                        hit = True
            reaches[nid] = hit
            order.append(node)
            continue
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        if node._ctx is not None:
            for p in node._ctx.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
    live = {k for k, v in reaches.items() if v}
    return order, live


def grad(output: Tensor, inputs, create_graph: bool = False, allow_unused: bool = False):
    """Gradients of a scalar ``output`` with respect to each of ``inputs``.

    With ``create_graph`` the returned tensors are themselves part of a graph
    and can be differentiated again.  Inputs that do not influence ``output``
    raise unless ``allow_unused``, in which case a zero tensor is returned.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if output.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError("inputs must be Tensors")

    order, live = _toposort(output, inputs)
    input_ids = {id(t) for t in inputs}
    found: dict[int, Tensor] = {}

    grads: dict[int, Tensor] = {}
    if output.requires_grad and id(output) in live:
        grads[id(output)] = Tensor(np.ones_like(output.data))

    prev_flag = getattr(_state, "in_backward", False)
    _state.in_backward = True
    try:
        with _grad_mode(create_graph):
            for node in reversed(order):
                nid = id(node)
                g = grads.pop(nid, None)
                if g is None:
                    continue
                if nid in input_ids:
                    found[nid] = g
                ctx = node._ctx
                if ctx is None:
                    continue
                needs = tuple(p.requires_grad and id(p) in live for p in ctx.parents)
                if not any(needs):
                    continue
                pgrads = ctx.backward(g, needs)
                for p, pg, need in zip(ctx.parents, pgrads, needs):
                    if not need or pg is None:
                        continue
                    if pg.shape != p.shape:
                        raise RuntimeError(
                            f"{type(ctx).__name__}.backward produced shape {pg.shape} for parent {p.shape}"
                        )
                    _check_finite(pg.data, f"backward of {type(ctx).__name__}")
                    pid = id(p)
                    grads[pid] = pg if pid not in grads else grads[pid] + pg
    finally:
        _state.in_backward = prev_flag

    result = []
    for t in inputs:
        g = found.get(id(t))
        if g is None:
            if not allow_unused:
                raise ValueError("an input does not take part in the graph of output")
            g = Tensor(np.zeros_like(t.data))
        elif not create_graph:
            g = Tensor(g.data)
        result.append(g)
    return result[0] if single else result


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------

def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    axes = tuple(range(ndiff)) + tuple(
        i + ndiff for i, s in enumerate(shape) if s == 1 and g.shape[i + ndiff] != 1
    )
    out = tsum(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


def _coerce(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g, needs):
        sa, sb = self.shapes
        return (
            _unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None,
        )


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g, needs):
        a, b = self.parents
        return (
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        )


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g, needs):
        return (-g,)


class Div(Function):
    check_finite = True

    def forward(self, a, b):
        return a / b

    def backward(self, g, needs):
        a, b = self.parents
        ga = _unbroadcast(g / b, a.shape) if needs[0] else None
        gb = _unbroadcast(-(g * a) / (b * b), b.shape) if needs[1] else None
        return ga, gb


class Exp(Function):
    check_finite = True

    def forward(self, a):
        return np.exp(a)

    def backward(self, g, needs):
        return (g * exp(self.parents[0]),)


class Log(Function):
    check_finite = True

    def forward(self, a):
        return np.log(a)

    def backward(self, g, needs):
        return (g / self.parents[0],)


class Log1p(Function):
    check_finite = True

    def forward(self, a):
        return np.log1p(a)

    def backward(self, g, needs):
        return (g / (self.parents[0] + 1.0),)


class Sqrt(Function):
    check_finite = True

    def forward(self, a):
        return np.sqrt(a)

    def backward(self, g, needs):
        return (g * 0.5 / sqrt(self.parents[0]),)


class Abs(Function):
    def forward(self, a):
        return np.abs(a)

    def backward(self, g, needs):
        return (g * Tensor(np.sign(self.parents[0].data)),)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, g, needs):
        shape = self.in_shape
        if not self.keepdims:
            if self.axis is None:
                kshape = (1,) * len(shape)
            else:
                axes = (self.axis,) if isinstance(self.axis, int) else self.axis
                axes = {ax % len(shape) for ax in axes}
                kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
            g = reshape(g, kshape)
        return (broadcast_to(g, shape),)


class BroadcastTo(Function):
    def forward(self, a, shape=None):
        self.in_shape = a.shape
        return np.broadcast_to(a, shape).copy()

    def backward(self, g, needs):
        return (_unbroadcast(g, self.in_shape),)


class Reshape(Function):
    def forward(self, a, shape=None):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, g, needs):
        return (reshape(g, self.in_shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, g, needs):
        if self.axes is None:
            return (transpose(g, None),)
        inv = tuple(np.argsort(self.axes))
        return (transpose(g, inv),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        return a @ b

    def backward(self, g, needs):
        a, b = self.parents
        return (
            matmul(g, transpose(b, None)) if needs[0] else None,
            matmul(transpose(a, None), g) if needs[1] else None,
        )


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return Add.apply(a, Neg.apply(b))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return Div.apply(a, b)


def neg(a) -> Tensor:
    return Neg.apply(as_tensor(a))


def exp(a) -> Tensor:
    return Exp.apply(as_tensor(a))


def log(a) -> Tensor:
    return Log.apply(as_tensor(a))


def log1p(a) -> Tensor:
    return Log1p.apply(as_tensor(a))


def sqrt(a) -> Tensor:
    return Sqrt.apply(as_tensor(a))


def tabs(a) -> Tensor:
    return Abs.apply(as_tensor(a))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    if isinstance(axis, list):
        axis = tuple(axis)
    return Sum.apply(as_tensor(a), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return BroadcastTo.apply(a, shape=tuple(shape))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None) -> Tensor:
    return Transpose.apply(as_tensor(a), axes=None if axes is None else tuple(axes))


def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return MatMul.apply(a, b)
