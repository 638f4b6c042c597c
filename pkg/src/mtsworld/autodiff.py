"""Define-by-run reverse-mode differentiation over numpy arrays.

Every primitive returns a :class:`Tensor`.  When at least one operand
requires a gradient the application is appended to the active
:class:`Tape`; :func:`backward` then walks the tape in reverse and
accumulates vector-Jacobian products.

Broadcasting is restricted to leading axes: two operands are compatible
when their shapes are equal or the shorter one is a trailing suffix of the
longer one (scalars included).  Everything else raises
:class:`ShapeMismatch`.

Functions such as :func:`matvec`, :func:`where` or :func:`sqrt` accept plain
arrays too and fall back to numpy when no operand is a Tensor, which lets
the Gaussian algebra be written once for both the training path and the
float64 oracle path.
"""

from __future__ import annotations

import threading
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatch",
    "NotScalarLoss",
    "tensor",
    "parameter",
    "backward",
    "stop_gradient",
    "broadcast_to",
    "concat",
    "stack",
    "where",
    "maximum",
    "minimum",
    "matmul",
    "matvec",
    "sqrt",
    "exp",
    "log",
    "tanh",
    "sin",
    "cos",
    "relu",
    "elu",
    "elu_plus_one",
    "softmax",
    "reciprocal",
    "value",
    "is_tensor",
]


class ShapeMismatch(ValueError):
    pass


class NotScalarLoss(ValueError):
    pass


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as they are created, so the list is already in
    topological order.  Use as a context manager to scope a training step.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: "Tensor") -> None:
        node._tape = self
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def gradient(self, loss: "Tensor", params: Iterable["Tensor"] | None = None):
        return backward(loss, params)


def _tape_stack() -> list[Tape]:
    loc = Tape._local
    if not hasattr(loc, "stack"):
        loc.stack = [Tape()]
    return loc.stack


def current_tape() -> Tape:
    return _tape_stack()[-1]


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_tape", "name", "__weakref__")

    # numpy should defer to our reflected operators
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._tape = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(other, self)

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _sub(other, self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(other, self)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g)

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return _unary(self, x**p, lambda g: g * p * x ** (p - 1))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        out = self.data[idx]
        shape = self.data.shape

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g) if _fancy(idx) else full.__setitem__(idx, g)
            return full

        return _unary(self, out, vjp)

    # -- methods -----------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        x_shape = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, x_shape).copy()

        return _unary(self, out, vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x_shape = self.data.shape
        return _unary(self, self.data.reshape(shape), lambda g: g.reshape(x_shape))

    def swapaxes(self, a1=-1, a2=-2):
        return _unary(self, np.swapaxes(self.data, a1, a2), lambda g: np.swapaxes(g, a1, a2))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def expand_dims(self, axis):
        x_shape = self.data.shape
        return _unary(self, np.expand_dims(self.data, axis), lambda g: g.reshape(x_shape))

    def square(self):
        x = self.data
        return _unary(self, x * x, lambda g: 2.0 * x * g)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value(x) -> np.ndarray:
    """Underlying array of a Tensor, or the input as a float64 array."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple, vjps: tuple) -> Tensor:
    out = Tensor(data)
    live = [(p, f) for p, f in zip(parents, vjps) if p.requires_grad]
    if live:
        out.requires_grad = True
        out._parents = tuple(p for p, _ in live)
        fns = tuple(f for _, f in live)
        out._backward = fns
        current_tape().record(out)
    return out


def _unary(x: Tensor, data, vjp) -> Tensor:
    return _make(data, (x,), (vjp,))


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeMismatch(f"incompatible shapes {a} and {b} (only leading-axis broadcasting)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _binary_prep(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    _check_broadcast(a.data.shape, b.data.shape)
    return a, b


def _add(a, b):
    a, b = _binary_prep(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def _sub(a, b):
    a, b = _binary_prep(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: -_unbroadcast(g, sb)))


def _mul(a, b):
    a, b = _binary_prep(a, b)
    x, y = a.data, b.data
    return _make(
        x * y,
        (a, b),
        (lambda g: _unbroadcast(g * y, x.shape), lambda g: _unbroadcast(g * x, y.shape)),
    )


def _div(a, b):
    a, b = _binary_prep(a, b)
    x, y = a.data, b.data
    out = x / y
    return _make(
        out,
        (a, b),
        (lambda g: _unbroadcast(g / y, x.shape), lambda g: _unbroadcast(-g * out / y, y.shape)),
    )


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """numpy ``matmul`` for operands of rank >= 2; batch axes broadcast from the left."""
    a, b = _as_tensor(a), _as_tensor(b)
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2:
        raise ShapeMismatch("matmul needs operands of rank >= 2; use matvec for vectors")
    if x.shape[-1] != y.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {x.shape} @ {y.shape}")
    _check_broadcast(x.shape[:-2], y.shape[:-2])
    return _make(
        x @ y,
        (a, b),
        (
            lambda g: _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape),
            lambda g: _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape),
        ),
    )


def matvec(m, v):
    """Apply ``m`` (shape ``(..., n, k)``) to vectors ``v`` (shape ``(..., k)``)."""
    if not (isinstance(m, Tensor) or isinstance(v, Tensor)):
        m, v = np.asarray(m), np.asarray(v)
        if m.ndim == 2:
            return v @ m.T
        return (m @ v[..., None])[..., 0]
    m, v = _as_tensor(m), _as_tensor(v)
    if m.ndim == 2:
        return matmul(v, m.T) if v.ndim >= 2 else matmul(v.reshape(1, -1), m.T).reshape(-1)
    return matmul(m, v.expand_dims(-1)).reshape(v.shape[:-1] + (m.shape[-2],))


def _elementwise(x, fwd, dfwd):
    if not isinstance(x, Tensor):
        return fwd(np.asarray(x, dtype=np.float64))
    d = x.data
    out = fwd(d)
    return _unary(x, out, lambda g: g * dfwd(d, out))


def exp(x):
    return _elementwise(x, np.exp, lambda d, o: o)


def log(x):
    return _elementwise(x, np.log, lambda d, o: 1.0 / d)


def sqrt(x):
    return _elementwise(x, np.sqrt, lambda d, o: 0.5 / o)


def tanh(x):
    return _elementwise(x, np.tanh, lambda d, o: 1.0 - o * o)


def sin(x):
    return _elementwise(x, np.sin, lambda d, o: np.cos(d))


def cos(x):
    return _elementwise(x, np.cos, lambda d, o: -np.sin(d))


def relu(x):
    return _elementwise(x, lambda d: np.maximum(d, 0.0), lambda d, o: (d > 0).astype(np.float64))


def _elu_fwd(d):
    return np.where(d > 0, d, np.expm1(np.minimum(d, 0.0)))


def elu(x):
    return _elementwise(x, _elu_fwd, lambda d, o: np.where(d > 0, 1.0, o + 1.0))


def elu_plus_one(x):
    """``elu(x) + 1``; strictly positive for every finite input."""
    return _elementwise(x, lambda d: _elu_fwd(d) + 1.0, lambda d, o: np.where(d > 0, 1.0, o))


def reciprocal(x):
    return _elementwise(x, lambda d: 1.0 / d, lambda d, o: -o * o)


def softmax(x, axis: int = -1):
    if not isinstance(x, Tensor):
        d = np.asarray(x, dtype=np.float64)
        e = np.exp(d - d.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _unary(x, out, vjp)


def concat(parts: Sequence, axis: int = -1):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)
    ts = [_as_tensor(p) for p in parts]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)
    data = np.concatenate([t.data for t in ts], axis=axis)

    def piece(i):
        lo, hi = bounds[i], bounds[i + 1]

        def vjp(g):
            return np.take(g, np.arange(lo, hi), axis=axis)

        return vjp

    return _make(data, tuple(ts), tuple(piece(i) for i in range(len(ts))))


def stack(parts: Sequence, axis: int = 0):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.stack([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)
    ts = [_as_tensor(p) for p in parts]
    data = np.stack([t.data for t in ts], axis=axis)

    def piece(i):
        return lambda g: np.take(g, i, axis=axis)

    return _make(data, tuple(ts), tuple(piece(i) for i in range(len(ts))))


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; the unselected branch gets no gradient
    and its values (NaN included) never leak into the result."""
    cond = np.asarray(cond, dtype=bool)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.where(cond, a, b)
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape
    zero = 0.0
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(np.where(cond, g, zero), sa),
            lambda g: _unbroadcast(np.where(cond, zero, g), sb),
        ),
    )


def maximum(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.maximum(a, b)
    a, b = _binary_prep(a, b)
    pick_a = a.data >= b.data
    return where(pick_a, a, b)


def minimum(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.minimum(a, b)
    a, b = _binary_prep(a, b)
    pick_a = a.data <= b.data
    return where(pick_a, a, b)


def broadcast_to(x, shape):
    """Explicit numpy-style broadcast; the gradient sums over the expanded axes."""
    shape = tuple(shape)
    if not isinstance(x, Tensor):
        return np.broadcast_to(np.asarray(x, dtype=np.float64), shape)
    x_shape = x.shape
    lead = len(shape) - len(x_shape)
    stretched = tuple(i + lead for i, n in enumerate(x_shape) if n == 1 and shape[i + lead] != 1)

    def vjp(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if stretched:
            g = g.sum(axis=tuple(a - lead for a in stretched), keepdims=True)
        return g

    return _unary(x, np.broadcast_to(x.data, shape), vjp)


def stop_gradient(x):
    """Same value, no tape edge."""
    if not isinstance(x, Tensor):
        return np.asarray(x, dtype=np.float64)
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Gradients of a scalar ``loss``.

    Returns a dict keyed by the requested parameters (or by every leaf that
    was reached when ``params`` is None).  Parameters the loss does not
    depend on get zero arrays.  The tape is left intact, so calling this
    twice gives identical results.
    """
    if loss.data.size != 1:
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    tape = loss._tape
    if loss.requires_grad and tape is not None:
        nodes = tape.nodes
        # restrict the walk to nodes created up to and including the loss
        end = len(nodes)
        for i in range(len(nodes) - 1, -1, -1):
            if nodes[i] is loss:
                end = i + 1
                break
        for i in range(end - 1, -1, -1):
            node = nodes[i]
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._backward):
                pg = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent._backward is None:
                    leaves[key] = parent
    if params is None:
        return {leaves[k]: grads[k] for k in leaves}
    out = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.data.shape)
    return out
