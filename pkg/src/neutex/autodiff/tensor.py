"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array. Every differentiable op records its
parents and a closure that maps the output gradient to input gradients; the
graph is walked in reverse topological order by :func:`backward` or
:func:`gradients`. There is no global tape, so independent graphs can be
built and differentiated concurrently from different threads.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = None
        self._consumed = False

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = array
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t._op = None
        t._consumed = False
        return t

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=DTYPE))


def _record(kind: str, out: np.ndarray, parents: tuple, backward) -> Tensor:
    t = Tensor._wrap(out)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
        t._op = kind
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", out, (a, b), backward)


_ROW_BLOCK = 8


def _rows_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` with the row count padded to a multiple of ``_ROW_BLOCK``.

    BLAS takes a different summation path for remainder rows, which would
    make a row's result depend on how many rows share the call. Padding
    keeps every output row bit-identical however the batch is chunked.
    """
    if x.ndim < 2:
        return x @ w
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    m = flat.shape[0]
    extra = (-m) % _ROW_BLOCK
    if extra:
        flat = np.concatenate([flat, np.zeros((extra, flat.shape[1]), dtype=flat.dtype)])
    out = flat @ w
    if extra:
        out = out[:m]
    return out.reshape(lead + out.shape[1:])


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2:
        raise ShapeError(f"matmul: right operand must be 1-D or 2-D, got {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if b.ndim == 1:
            if a.requires_grad:
                ga = np.multiply.outer(g, bd)
            if b.requires_grad:
                gb = np.tensordot(g, ad, axes=(tuple(range(g.ndim)), tuple(range(ad.ndim - 1))))
        else:
            if a.requires_grad:
                ga = _rows_matmul(g, bd.T)
            if b.requires_grad:
                a2 = ad.reshape(-1, ad.shape[-1]) if ad.ndim > 1 else ad[None, :]
                g2 = g.reshape(-1, g.shape[-1]) if g.ndim > 1 else g[None, :]
                gb = a2.T @ g2
        return ga, gb

    return _record("matmul", _rows_matmul(ad, bd), (a, b), backward)


def linear(x, weight, bias) -> Tensor:
    """Fused ``x @ weight + bias`` for 2-D weights."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {weight.shape} and {bias.shape}")
    xd, wd = x.data, weight.data
    out = _rows_matmul(xd, wd)
    out += bias.data

    def backward(g):
        gx = _rows_matmul(g, wd.T) if x.requires_grad else None
        gw = gb = None
        if weight.requires_grad or bias.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            if weight.requires_grad:
                gw = xd.reshape(-1, xd.shape[-1]).T @ g2
            if bias.requires_grad:
                gb = g2.sum(axis=0)
        return gx, gw, gb

    return _record("linear", out, (x, weight, bias), backward)


# ----------------------------------------------------------------- unary ops


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("sin", np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("cos", np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _record("relu", out, (a,), lambda g: (g * (out > 0),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)

    def backward(g):
        return (g * _sigmoid(ad),)

    return _record("softplus", out, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp values; the gradient is zero wherever the bound is active."""
    a = as_tensor(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return _record("clip", out, (a,), lambda g: (g * inside,))


# ------------------------------------------------------------ reductions etc.


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record("sum", np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([shape[ax] for ax in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return _record("mean", np.mean(a.data, axis=axes, keepdims=keepdims), (a,), backward)


def l2norm(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(out > 0, ad / out, 0.0)
        return (g * ratio,)

    return _record("l2norm", out if keepdims else np.squeeze(out, axis=axis), (a,), backward)


def cumsum(a, axis=-1, exclusive=False) -> Tensor:
    """Running sum along ``axis``; ``exclusive`` shifts it so element 0 is 0."""
    a = as_tensor(a)
    ax = axis % a.ndim
    out = np.cumsum(a.data, axis=ax)
    if exclusive:
        head = np.zeros_like(np.take(out, [0], axis=ax))
        out = np.concatenate([head, np.delete(out, -1, axis=ax)], axis=ax)

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax)
        if exclusive:
            tail = np.zeros_like(np.take(rev, [0], axis=ax))
            rev = np.concatenate([np.delete(rev, 0, axis=ax), tail], axis=ax)
        return (rev,)

    return _record("cumsum", out, (a,), backward)


# -------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def broadcast(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {old} to {tuple(shape)}") from None
    return _record("broadcast", out, (a,), lambda g: (_unbroadcast(g, old),))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record("concat", out, tuple(tensors), backward)


def stack(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, _insert(t.shape, axis, t.ndim + 1)) for t in tensors]
    return concat(expanded, axis=axis)


def _insert(shape, axis, ndim):
    ax = axis % ndim
    return shape[:ax] + (1,) + shape[ax:]


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {a.shape}") from None
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _record("slice", out, (a,), backward)


def take(a, indices, axis=0) -> Tensor:
    """Gather along ``axis`` with integer indices; repeats scatter-add back."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    shape = a.shape
    ax = axis % a.ndim

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _record("take", np.take(a.data, idx, axis=ax), (a,), backward)


# ---------------------------------------------------------------- dispatcher

OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "linear": linear,
    "sum": sum_,
    "mean": mean,
    "exp": exp,
    "log": log,
    "sin": sin,
    "cos": cos,
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "square": square,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice_,
    "broadcast": broadcast,
    "l2norm": l2norm,
    "neg": neg,
    "clip": clip,
    "cumsum": cumsum,
    "reshape": reshape,
    "take": take,
}


def tensor_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(root: Tensor, release: bool) -> dict:
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise GraphError("backward called twice on the same graph; rebuild it first")
    if not np.isfinite(root.data).all():
        raise FloatingPointError("non-finite value at backward root")
    leaf_grads = {}
    if not root.requires_grad:
        return leaf_grads
    order = _topo_order(root)
    grads = {id(root): np.ones(root.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._consumed:
            raise GraphError("graph node was released by an earlier backward pass")
        if node._backward is None:
            leaf_grads[id(node)] = (node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
        if release:
            node._backward = None
            node._parents = ()
            node._consumed = True
    root._consumed = True
    for node, g in leaf_grads.values():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for leaf of shape {node.shape}")
    return leaf_grads


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    for node, g in _propagate(root, release=True).values():
        g = np.array(g, dtype=DTYPE)
        node.grad = g if node.grad is None else node.grad + g


def gradients(root: Tensor, wrt) -> list:
    """Return d(root)/d(t) for each ``t`` in ``wrt`` without touching ``.grad``.

    Leaves that are unreachable get a zero array.
    """
    found = _propagate(root, release=True)
    out = []
    for t in wrt:
        hit = found.get(id(t))
        out.append(np.zeros(t.shape, dtype=DTYPE) if hit is None else np.array(hit[1], dtype=DTYPE))
    return out
