"""Dense tensors with tape-free reverse-mode differentiation.

Each op output keeps references to its parents and a closure that maps the
output gradient to parent gradients. ``Tensor.backward`` walks the graph
reachable from one scalar in reverse topological order, so independent graphs
never share mutable state; only leaf ``.grad`` buffers are written.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from hyperdas import _kernels as K


class ContractError(ValueError):
    """An op received inputs that violate its preconditions."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def precision(dtype):
    """Build tensors in ``dtype`` inside the block (float64 for gradient oracles)."""
    prev = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def get_dtype():
    return _dtype()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.name = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf with requires_grad."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

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
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise ContractError("division only by python scalars")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError("non-finite value produced by forward op")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    t.requires_grad = track
    if track:
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ContractError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    x2 = a.data.reshape(-1, a.shape[-1]) if a.ndim else a.data.reshape(1, 1)
    out = K.gelu_fwd(x2).reshape(a.shape)

    def backward(g):
        return (K.gelu_bwd(x2, np.ascontiguousarray(g).reshape(x2.shape)).reshape(a.shape),)

    return _make(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return _make(out, (a,), lambda g: (np.where(mask, 0, g).astype(g.dtype),))


def where_gt(a: Tensor, threshold: float) -> Tensor:
    """``a`` where ``a > threshold``, else 0 (the hinge of the sparsity penalty)."""
    mask = a.data > threshold
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


# ----------------------------------------------------------------------------
# linear algebra and shape
# ----------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ContractError(f"matmul batch shapes differ: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            raise ContractError("transpose needs ndim >= 2")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ContractError(f"invalid permutation {axes} for ndim {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractError(f"cannot reshape {a.shape} to {shape}") from exc
    src = a.shape
    return _make(out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of nothing")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ContractError("concat: shapes differ off the concat axis")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax))
                     for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ContractError(f"split sizes {sizes} do not cover extent {a.shape[ax]}")
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + s)
        out.append(getitem(a, tuple(idx)))
        start += s
    return out


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    out = np.ascontiguousarray(a.data[idx])
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"token id out of range [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# ----------------------------------------------------------------------------
# normalisation, softmax, losses
# ----------------------------------------------------------------------------

def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x).reshape(-1, x.shape[-1])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0:
        raise ContractError("softmax of a scalar")
    ax = axis % x.ndim
    if x.shape[ax] == 0:
        raise ContractError("softmax over an empty axis")
    moved = np.moveaxis(x.data, ax, -1)
    y = K.softmax_fwd(_rows(moved)).reshape(moved.shape)

    def backward(g):
        gm = np.moveaxis(g, ax, -1)
        dx = K.softmax_bwd(_rows(y), _rows(gm)).reshape(moved.shape)
        return (np.ascontiguousarray(np.moveaxis(dx, -1, ax)),)

    return _make(np.ascontiguousarray(np.moveaxis(y, -1, ax)), (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    if x.shape[-1] == 0:
        raise ContractError("log_softmax over an empty axis")
    out = K.log_softmax_fwd(_rows(x.data)).reshape(x.shape)

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows; a 1-D input is one row."""
    single = logits.ndim == 1
    lg = reshape(logits, (1, -1)) if single else logits
    if lg.ndim != 2:
        raise ContractError("cross_entropy expects [V] or [N, V] logits")
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n, v = lg.shape
    if tgt.shape != (n,):
        raise ContractError(f"expected {n} targets, got shape {tgt.shape}")
    if tgt.min() < 0 or tgt.max() >= v:
        raise ContractError(f"target id out of range [0, {v})")
    logp = K.log_softmax_fwd(lg.data)
    rows = np.arange(n)
    loss = -logp[rows, tgt].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, tgt] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=lg.data.dtype), (lg,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ContractError("layer_norm gain/bias must match the last extent")
    out, xhat, rstd = K.layer_norm_fwd(_rows(x.data), gain.data, bias.data, eps)

    def backward(g):
        dx, dg, db = K.layer_norm_bwd(_rows(g), xhat, rstd, gain.data)
        return dx.reshape(x.shape), dg, db

    return _make(out.reshape(x.shape), (x, gain, bias), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ContractError("rms_norm gain must match the last extent")
    out, xhat, rstd = K.rms_norm_fwd(_rows(x.data), gain.data, eps)

    def backward(g):
        dx, dg = K.rms_norm_bwd(_rows(g), xhat, rstd, gain.data)
        return dx.reshape(x.shape), dg

    return _make(out.reshape(x.shape), (x, gain), backward)


# ----------------------------------------------------------------------------
# Householder reflection
# ----------------------------------------------------------------------------

def householder_apply(x: Tensor, v: Tensor, eps: float = 1e-6) -> Tensor:
    """Reflect ``x`` through the hyperplane orthogonal to ``v`` along the last axis.

    ``x - 2 (x.v / v.v) v`` in O(d) per vector; ``v`` broadcasts over the
    leading axes of ``x``. Rows whose ``|v| <= eps`` are passed through
    unchanged (identity reflection); callers decide whether that is an error.
    """
    if x.shape[-1] != v.shape[-1]:
        raise ContractError(f"householder: width mismatch {x.shape} vs {v.shape}")
    _check_broadcast(x, v, "householder_apply")
    xd, vd = x.data, v.data
    vv = (vd * vd).sum(axis=-1, keepdims=True)
    ok = vv > eps * eps
    safe_vv = np.where(ok, vv, 1.0)
    coef = np.where(ok, 2.0 / safe_vv, 0.0).astype(xd.dtype)
    xv = (xd * vd).sum(axis=-1, keepdims=True)
    out = xd - coef * xv * vd

    def backward(g):
        gv = (g * vd).sum(axis=-1, keepdims=True)
        gx = g - coef * gv * vd if x.requires_grad else None
        gvec = None
        if v.requires_grad:
            full = -coef * (xd * gv + xv * g - coef * xv * gv * vd)
            gvec = _unbroadcast(full, vd.shape)
        if gx is not None:
            gx = _unbroadcast(gx, xd.shape)
        return gx, gvec

    return _make(out, (x, v), backward)

