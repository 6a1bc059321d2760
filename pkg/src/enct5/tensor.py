"""Small reverse-mode autodiff over dense numpy arrays.

Only the primitives the T5 graphs need are provided. Every op returns a new
:class:`Tensor` that remembers its parents and a closure computing the
vector-Jacobian product; :func:`backward` walks the graph in reverse
topological order so gradient accumulation order is fixed for a fixed graph.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Rng",
    "NonFiniteError",
    "EmptyLossSupportError",
    "tensor",
    "parameter",
    "matmul",
    "softmax_lastdim",
    "rms_norm",
    "gelu",
    "gather_rows",
    "cross_entropy_masked",
    "mse_masked",
    "backward",
    "topological_order",
    "no_grad",
    "checked",
    "set_default_dtype",
    "get_default_dtype",
    "mask_value",
    "GELU_COEF",
    "GELU_SQRT_2_OVER_PI",
]

# tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_COEF = 0.044715

_state = {"dtype": np.float64, "grad_enabled": True, "checked": False}


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an op produces NaN or Inf."""


class EmptyLossSupportError(ValueError):
    def __init__(self) -> None:
        super().__init__("empty loss support")


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


def get_default_dtype():
    return _state["dtype"]


def mask_value(dtype=None) -> float:
    """Additive constant used for disallowed attention pairs."""
    dtype = np.dtype(dtype or _state["dtype"])
    return -1e9 if dtype == np.float32 else -1e30


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def checked(enabled: bool = True) -> Iterator[None]:
    """Raise :class:`NonFiniteError` whenever an op output is not finite."""
    prev = _state["checked"]
    _state["checked"] = enabled
    try:
        yield
    finally:
        _state["checked"] = prev


class Tensor:
    """Dense array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], tuple] | None = None,
        _op: str = "leaf",
    ) -> None:
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_state["dtype"])
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype or _state["dtype"]), requires_grad)


def parameter(data, name: str | None = None) -> Tensor:
    arr = np.array(data)
    if arr.dtype.kind != "f":
        arr = arr.astype(_state["dtype"])
    return Tensor(arr, requires_grad=True, name=name)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _state["dtype"]
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    if _state["checked"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")
    needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=fn, _op=op)


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


# -- elementwise ---------------------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    return _wrap(a, b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), fn, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), fn, "mul")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    inner = GELU_SQRT_2_OVER_PI * (xd + GELU_COEF * x2 * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def fn(g):
        dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), fn, "gelu")


# -- shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = np.broadcast_to(x.data, shape).copy()
    return _make(out, (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), fn, "getitem")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a @ b`` with numpy broadcasting of batch dims."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        if bd.ndim == 2 and ad.ndim >= 2:
            # weight matrix shared across the batch: fold batch into rows
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return _unbroadcast(ga, ad.shape), gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), fn, "matmul")


# -- normalisation / attention -------------------------------------------------

def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * scale`` over the last axis."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    xd, sd = x.data, scale.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def fn(g):
        gs = (g * xhat).reshape(-1, sd.shape[-1]).sum(axis=0)
        gxhat = g * sd
        gx = r * (gxhat - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True))
        return gx, gs.reshape(sd.shape)

    return _make(xhat * sd, (x, scale), fn, "rms_norm")


def softmax_lastdim(x: Tensor, mask: np.ndarray | Tensor | None = None) -> Tensor:
    """Softmax over the last axis with an optional additive mask.

    Entries whose mask value is at or below half the masking constant are
    treated as disallowed; a row with no allowed entries returns zeros.
    """
    xd = x.data
    if mask is None:
        z = xd
        allowed = None
    else:
        md = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        z = xd + md
        allowed = md > 0.5 * mask_value(xd.dtype)
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    if allowed is not None:
        e = e * allowed
    s = e.sum(axis=-1, keepdims=True)
    p = e / np.where(s == 0.0, 1.0, s)

    def fn(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (x,), fn, "softmax")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def fn(g):
        flat_ids = ids.reshape(-1)
        g2 = g.reshape(-1, shape[-1])
        full = np.empty(shape, dtype=g.dtype)
        # per-column bincount: sequential, hence deterministic, and far faster than np.add.at
        for j in range(shape[-1]):
            full[:, j] = np.bincount(flat_ids, weights=g2[:, j], minlength=shape[0])
        return (full,)

    return _make(table.data[ids], (table,), fn, "gather_rows")


# -- losses --------------------------------------------------------------------

def _support(weight_mask, shape) -> np.ndarray:
    w = np.asarray(weight_mask)
    if w.shape != shape:
        raise ValueError(f"mask shape {w.shape} does not match {shape}")
    if not np.all((w == 0) | (w == 1)):
        raise ValueError("weight_mask entries must be 0 or 1")
    idx = np.flatnonzero(w.reshape(-1))
    if idx.size == 0:
        raise EmptyLossSupportError()
    return idx


def cross_entropy_masked(logits: Tensor, targets, weight_mask) -> Tensor:
    """Mean negative log-likelihood over positions whose mask is 1.

    Masked positions are dropped before any arithmetic, so they contribute
    exactly zero to both the value and the gradient.
    """
    ld = logits.data
    c = ld.shape[-1]
    targets = np.asarray(targets)
    idx = _support(weight_mask, ld.shape[:-1])
    flat = ld.reshape(-1, c)
    sel = flat[idx]
    t = targets.reshape(-1)[idx]
    if t.min() < 0 or t.max() >= c:
        raise IndexError("target class out of range")
    m = sel.max(axis=-1, keepdims=True)
    e = np.exp(sel - m)
    s = e.sum(axis=-1, keepdims=True)
    lse = np.log(s) + m
    rows = np.arange(idx.size)
    nll = lse[:, 0] - sel[rows, t]
    count = float(idx.size)
    value = np.asarray(nll.sum() / count)

    def fn(g):
        local = e / s
        local[rows, t] -= 1.0
        full = np.zeros_like(flat)
        full[idx] = local * (g / count)
        return (full.reshape(ld.shape),)

    return _make(value, (logits,), fn, "cross_entropy")


def mse_masked(pred: Tensor, targets, weight_mask) -> Tensor:
    pd = pred.data
    idx = _support(weight_mask, pd.shape)
    diff = pd.reshape(-1)[idx] - np.asarray(targets, dtype=pd.dtype).reshape(-1)[idx]
    count = float(idx.size)
    value = np.asarray((diff * diff).sum() / count)

    def fn(g):
        full = np.zeros(pd.size, dtype=pd.dtype)
        full[idx] = 2.0 * diff * (g / count)
        return (full.reshape(pd.shape),)

    return _make(value, (pred,), fn, "mse")


# -- graph traversal -----------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    }
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- randomness ----------------------------------------------------------------

class Rng:
    """Seedable generator backed by numpy's PCG64 bit generator.

    Normal draws use numpy's ziggurat transform. ``Rng.for_name`` derives an
    independent stream from ``(seed, name)`` so parameter initialisation does
    not depend on construction order.
    """

    def __init__(self, seed: int | Sequence[int]) -> None:
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    @classmethod
    def for_name(cls, seed: int, name: str) -> "Rng":
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        return cls([int(seed), int.from_bytes(digest[:8], "little")])

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace: bool = True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self._gen.permutation(x)

    def random(self) -> float:
        return float(self._gen.random())
