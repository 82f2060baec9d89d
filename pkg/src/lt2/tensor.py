"""Dense arrays with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation that
touches a tensor with ``requires_grad`` produces an output node holding its
parents and a backward rule. :func:`backward` linearises the graph reachable
from a scalar loss into a :class:`Tape` (topological order) and replays it in
reverse, accumulating gradients into leaves.

Only what the models in this package need is implemented; broadcasting follows
numpy semantics and gradients are reduced back to operand shapes.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float64

_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

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


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype == np.float32:
        dtype = np.float32
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype if data.dtype in (np.float32, np.float64) else None)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- tape ---------------------------------------------------------------------
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def backward(self, seed: np.ndarray) -> None:
        output = self.nodes[-1]
        grads: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype, copy=True).reshape(node.shape)
                else:
                    node.grad += g
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    tape = Tape.from_output(loss)
    tape.backward(np.ones_like(loss.data))
    return tape


# -- elementwise ----------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def pow_scalar(a, p: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _node(x**p, (a,), lambda g: (g * p * x ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; pick the matching branch per sign
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid_np(x)
    return _node(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _node(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),), "relu")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)

    return _node(np.where(cond, a.data, b.data), (a, b), bw, "where")


# -- reductions and shape ---------------------------------------------------------
def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(x % a.ndim for x in axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for ndim {a.ndim}")
    inv = tuple(np.argsort([x % a.ndim for x in axes]))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {src} to {tuple(shape)}") from None
    return _node(np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, src),), "broadcast")


def getitem(a, index) -> Tensor:
    """Basic and integer-array indexing (``slice`` in the op list)."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise DimensionError(str(exc)) from None
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), bw, "slice")


slice_ = getitem


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty list")
    ax = _norm_axis(axis, ts[0].ndim)[0]
    try:
        out = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in ts]} along {axis}: {exc}") from None
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis)


# -- linear algebra ---------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1:
        raise DimensionError(f"matmul needs arrays, got shapes {ad.shape} and {bd.shape}")
    a2 = ad[None, :] if ad.ndim == 1 else ad
    b2 = bd[:, None] if bd.ndim == 1 else bd
    if a2.shape[-1] != b2.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {ad.shape} and {bd.shape}")
    try:
        out2 = np.matmul(a2, b2)
    except ValueError:
        raise DimensionError(f"matmul: cannot broadcast batch dims of {ad.shape} and {bd.shape}") from None

    def bw(g):
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(bd.shape)
        return ga, gb

    out = out2
    if ad.ndim == 1:
        out = out.squeeze(-2)
    if bd.ndim == 1:
        out = out.squeeze(-1)
    return _node(np.asarray(out), (a, b), bw, "matmul")


def outer_product(u, v) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1:
        raise DimensionError(f"outer_product needs vectors, got {u.shape} and {v.shape}")
    return matmul(reshape(u, (-1, 1)), reshape(v, (1, -1)))


# -- normalisation, softmax ---------------------------------------------------------
def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Max-stabilised softmax. Entries where ``mask`` is False get weight exactly 0."""
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)[0]
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=ax, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _node(s, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)[0]
    x = a.data
    m = np.max(x, axis=ax, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=ax, keepdims=True))
    out = x - lse
    s = np.exp(out)
    return _node(out, (a,), lambda g: (g - s * g.sum(axis=ax, keepdims=True),), "log_softmax")


def rmsnorm(x, weight=None, eps: float = 1e-6) -> Tensor:
    """``x / max(rms(x), eps) * weight`` along the last axis."""
    if eps <= 0:
        raise ContractError("rmsnorm eps must be positive")
    x = as_tensor(x)
    xd = x.data
    d = xd.shape[-1]
    rms = np.sqrt((xd * xd).mean(axis=-1, keepdims=True))
    clamped = rms < eps
    r = np.where(clamped, eps, rms)
    y = xd / r

    def bw(g):
        # d(x/r)/dx = I/r - x x^T/(d r^3) while r is not clamped
        corr = np.where(clamped, 0.0, (g * y).sum(axis=-1, keepdims=True) / d)
        return ((g - y * corr) / r,)

    out = _node(y, (x,), bw, "rmsnorm")
    if weight is not None:
        weight = as_tensor(weight)
        if weight.shape != (d,):
            raise DimensionError(f"rmsnorm weight shape {weight.shape} != ({d},)")
        out = mul(out, weight)
    return out


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    clamped = n < eps
    r = np.where(clamped, eps, n)
    y = xd / r

    def bw(g):
        corr = np.where(clamped, 0.0, (g * y).sum(axis=axis, keepdims=True))
        return ((g - y * corr) / r,)

    return _node(y, (x,), bw, "l2_normalize")


def rope_tables(positions, dim: int, theta: float = 10000.0, dtype=DEFAULT_DTYPE):
    """cos/sin tables of shape ``(len(positions), dim // 2)`` for interleaved pairs."""
    if dim % 2:
        raise DimensionError(f"RoPE needs an even head dimension, got {dim}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    inv = theta ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = pos * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x, positions, theta: float = 10000.0) -> Tensor:
    """Rotate interleaved pairs ``(x[2i], x[2i+1])`` by ``position * theta^(-2i/dim)``.

    ``x`` has shape ``(..., L, dim)`` and ``positions`` has length ``L``
    (a scalar position is accepted for a single vector).
    """
    x = as_tensor(x)
    dim = x.shape[-1]
    positions = np.atleast_1d(np.asarray(positions))
    cos, sin = rope_tables(positions, dim, theta, x.data.dtype)
    if x.ndim == 1:
        cos, sin = cos[0], sin[0]
    elif cos.shape[0] != x.shape[-2]:
        raise DimensionError(f"rope: {cos.shape[0]} positions for sequence axis {x.shape[-2]}")
    xd = x.data
    x1, x2 = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def bw(g):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = -g1 * sin + g2 * cos
        return (gx,)

    return _node(out, (x,), bw, "rope")


# -- indexing helpers ----------------------------------------------------------------
def embedding(weight, ids) -> Tensor:
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    shape = weight.shape

    def bw(g):
        full = np.zeros(shape, dtype=weight.data.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _node(weight.data[ids], (weight,), bw, "embedding")


def take_along_axis(a, indices, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=a.data.dtype)
        ax = axis % len(shape)
        grid = list(np.indices(idx.shape, sparse=True))
        grid[ax] = idx
        np.add.at(full, tuple(grid), g)
        return (full,)

    return _node(np.take_along_axis(a.data, idx, axis), (a,), bw, "take")


# -- gradient checking ------------------------------------------------------------------
def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5, index: Iterable | None = None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``t``.

    Entries not listed in ``index`` (flat indices) are left at zero.
    """
    flat = t.data.reshape(-1)
    out = np.zeros_like(flat)
    idxs = range(flat.size) if index is None else index
    with no_grad():
        for i in idxs:
            old = flat[i]
            flat[i] = old + h
            fp = float(fn().data)
            flat[i] = old - h
            fm = float(fn().data)
            flat[i] = old
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(t.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = max(float(np.linalg.norm(np.ravel(a))), float(np.linalg.norm(np.ravel(b))), 1e-30)
    return num / den


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
              max_entries: int | None = None, rng=None) -> list[float]:
    """Relative error between tape and finite-difference gradients, one per tensor.

    With ``max_entries`` only a random subset of each tensor's entries is
    compared (both sides restricted to the same subset).
    """
    for p in params:
        p.grad = None
    backward(fn())
    rng = np.random.default_rng(0) if rng is None else rng
    errs = []
    for p in params:
        n = p.size
        if max_entries is None or n <= max_entries:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        fd = numerical_grad(fn, p, h, idx).reshape(-1)[idx]
        tape = (p.grad if p.grad is not None else np.zeros(p.shape)).reshape(-1)[idx]
        errs.append(relative_error(tape, fd))
    return errs
