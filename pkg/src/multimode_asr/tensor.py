"""Float64 tensors with taped reverse-mode differentiation.

Every primitive records its inputs and a closure that maps the output adjoint
to input adjoints.  ``Tensor.backward`` orders the record topologically and
replays it in reverse.  Only leaf tensors (those not produced by an op) keep a
``.grad`` buffer; it accumulates across calls until ``zero_grad``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1 or self.data.ndim > 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        adjoints: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes if axes else None)


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, k: float) -> Tensor:
    return _record(a.data * k, (a,), lambda g: (g * k,))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    x = a.data
    return _record(np.log(x), (a,), lambda g: (g / x,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    x = a.data
    keep = x >= floor
    return _record(np.maximum(x, floor), (a,), lambda g: (g * keep,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _record(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def elementwise(op_kind: str, *args, k: float | None = None) -> Tensor:
    """Dispatch by name; ``scale`` takes its factor through ``k``."""
    unary = {"tanh": tanh, "gelu": gelu, "exp": exp, "log": log, "neg": neg}
    if op_kind in unary:
        (a,) = args
        return unary[op_kind](as_tensor(a))
    if op_kind == "scale":
        (a,) = args
        return scale(as_tensor(a), k)
    if op_kind in ("add", "mul"):
        a, b = map(as_tensor, args)
        if a.shape != b.shape:
            raise DimensionError(f"{op_kind}: shapes {a.shape} and {b.shape} differ")
        return add(a, b) if op_kind == "add" else mul(a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------- reductions / shape

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(a.data[index], (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _record(out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _record(table.data[ids], (table,), backward)


def gather_last(a: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., ] = a[..., index[...]]`` along the last axis."""
    idx = np.asarray(index, dtype=np.int64)[..., None]
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _record(np.take_along_axis(a.data, idx, axis=-1)[..., 0], (a,), backward)


# ---------------------------------------------------------------- normalisers

def logsumexp(x: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("logsumexp of an empty sequence")
    m = np.max(x)
    if m == -np.inf:
        return -math.inf
    return float(m + np.log(np.sum(np.exp(x - m))))


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable bool) marks allowed slots.

    Disallowed slots get a -inf logit, so their weight is exactly zero.
    """
    x = a.data if mask is None else np.where(mask, a.data, -np.inf)
    x = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _record(y, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - np.max(x, axis=-1, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    p = np.exp(out)
    return _record(out, (a,), lambda g: (g - p * np.sum(g, axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gx_hat = g * gain.data
        gx = inv / d * (
            d * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _record(xhat * gain.data + bias.data, (x, gain, bias), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    worst: tuple[str, int] | None
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def finite_difference_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    tol: float = 1e-4,
    h: float = 1e-5,
    max_coords: int | None = 400,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps exactly-zero gradients from dividing by zero.  When the total
    coordinate count exceeds ``max_coords`` a seeded subset of that size is
    checked, spread over every tensor.
    """
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    f(params).backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    coords = [(k, i) for k, p in params.items() for i in range(p.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst, worst_err = None, 0.0
    with no_grad():
        for k, i in coords:
            flat = params[k].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params).item()
            flat[i] = orig - h
            fm = f(params).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = analytic[k].reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            if err > worst_err or worst is None:
                worst, worst_err = (k, i), err
    for p in params.values():
        p.grad = None
    return GradCheckReport(worst_err, len(coords), worst, tol)
