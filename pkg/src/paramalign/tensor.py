"""Dense tensors with reverse-mode differentiation.

Data lives in row-major numpy buffers (float32 or float64). Every op builds a
node holding its parents and a closure that maps the output gradient to
parent gradients; :meth:`Tensor.backward` walks the graph in reverse
topological order and accumulates into leaf ``.grad`` buffers additively.

Matmuls are tallied by an optional :class:`FlopCounter` so closed-form cost
formulas can be checked against what a forward pass actually does.
"""

from __future__ import annotations

import contextlib
import zlib
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 4
DTYPES = {"float32": np.float32, "float64": np.float64}


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


# --------------------------------------------------------------------------
# FLOP accounting


class FlopCounter:
    """Tallies FLOPs per tag while active.

    Matmuls count ``2*m*k*n`` per batch element. Elementwise adds of two
    tensors count one FLOP per output element under the ``"add"`` kind.
    """

    def __init__(self):
        self.matmul = defaultdict(int)
        self.add = defaultdict(int)

    def total(self, kind: str = "matmul", tag: str | None = None) -> int:
        table = getattr(self, kind)
        if tag is None:
            return sum(table.values())
        return table.get(tag, 0)


_counters: list[FlopCounter] = []
_tags: list[str] = ["default"]


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


@contextlib.contextmanager
def flop_tag(tag: str):
    _tags.append(tag)
    try:
        yield
    finally:
        _tags.pop()


def _tally(kind: str, n: int):
    for c in _counters:
        getattr(c, kind)[_tags[-1]] += int(n)


# --------------------------------------------------------------------------
# RNG


class Rng:
    """Seeded PCG64 stream.

    ``child(label)`` derives an independent stream from the seed and a label
    (crc32 of the label is used as spawn key), so adding a new parameter
    group never shifts the draws of existing ones.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = _key
        ss = np.random.SeedSequence(self.seed, spawn_key=_key)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, self._key + (zlib.crc32(label.encode()),))

    def normal(self, shape, std=1.0, dtype=np.float32) -> np.ndarray:
        return (self.gen.standard_normal(shape) * std).astype(dtype)

    def integers(self, high, size=None) -> np.ndarray:
        return self.gen.integers(0, high, size=size)

    def permutation(self, n) -> np.ndarray:
        return self.gen.permutation(n)


# --------------------------------------------------------------------------
# Tensor


def _check_finite(data: np.ndarray, op: str):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        _check_finite(arr, "construction")
        self.data = np.asarray(arr, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, data: np.ndarray, op: str) -> "Tensor":
        t = cls.__new__(cls)
        _check_finite(data, op)
        t.data = np.asarray(data, order="C")
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t._op = op
        return t

    # -- basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    # -- autodiff
    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.data.size != 1 or self.ndim != 0:
                raise ShapeError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- operators
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(_as_tensor(o, self.dtype), self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise TypeError("tensor division is not supported")
        return mul(self, 1.0 / o)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype), "const")


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(data, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Ops


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data
    if a._op != "const" and b._op != "const":
        _tally("add", out.size)
    return _node(out, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    return _node(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = np.asarray(b, dtype=a.dtype)
        return _node(a.data * s, "scale", (a,), lambda g: (g * s,))
    a = _as_tensor(a, b.dtype)
    return _node(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    _tally("matmul", 2 * m * k * n * int(np.prod(out.shape[:-2], dtype=np.int64)))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                # shared weight: fold all leading axes into one product
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _node(out, "matmul", (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    if out.ndim > MAX_RANK:
        raise ShapeError(f"rank {out.ndim} exceeds {MAX_RANK}")
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out), "index", (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range [0, {table.shape[0]})")
    return index(table, ids)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=axis), "concat", tuple(parts), backward)


def sum_all(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(
        np.asarray(a.data.mean()), "mean", (a,), lambda g: (np.broadcast_to(g / n, a.shape).astype(a.dtype),)
    )


def causal_mask(n: int, m: int | None = None) -> np.ndarray:
    """Boolean keep-mask, True on and below the diagonal."""
    m = n if m is None else m
    return np.tril(np.ones((n, m), dtype=bool))


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean keep-mask broadcastable to ``a``; dropped entries
    come out exactly 0. A row with every entry dropped is rejected.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row has every entry masked")
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    if mask is not None:
        e = np.where(mask, e, 0.0).astype(a.dtype)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, "softmax", (a,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x^2) + eps) * gain`` over the last axis."""
    if x.shape[-1] < 1:
        raise ShapeError("rms_norm over an empty axis")
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"gain shape {gain.shape} does not match {x.shape[-1]}")
    h = x.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    denom = ms + eps
    inv = np.divide(1.0, np.sqrt(denom), out=np.zeros_like(denom), where=denom > 0)
    xhat = x.data * inv
    out = xhat * gain.data

    def backward(g):
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gx = None
        if x.requires_grad:
            gy = g * gain.data
            gx = inv * (gy - xhat * (gy * xhat).sum(axis=-1, keepdims=True) / h)
        return gx, gg

    return _node(out, "rms_norm", (x, gain), backward)


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _node(x.data * s, "silu", (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    Leading axes of ``logits`` are flattened against ``targets``.
    """
    targets = np.asarray(targets).reshape(-1)
    z = logits.data.reshape(-1, logits.shape[-1])
    if targets.shape[0] != z.shape[0]:
        raise ShapeError("targets do not match logits rows")
    if targets.size and (targets.min() < 0 or targets.max() >= z.shape[1]):
        raise IndexError("target id out of range")
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(z.shape[0])
    nll = lse - z[rows, targets]
    n = z.shape[0]

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return ((p * (g / n)).astype(logits.dtype).reshape(logits.shape),)

    return _node(np.asarray(nll.mean(), dtype=logits.dtype), "cross_entropy", (logits,), backward)


# --------------------------------------------------------------------------
# Gradient checking


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h_step: float = 1e-5,
    n_samples: int | None = None,
    rng: Rng | None = None,
    coords: Sequence[tuple[int, int]] | None = None,
) -> float:
    """Max relative error between ``backward()`` and central differences.

    ``f`` re-evaluates the loss from the current parameter buffers. When
    ``n_samples`` is given, that many coordinates are drawn uniformly over
    all parameters; otherwise every coordinate is checked. ``coords`` may
    list explicit ``(param_index, flat_index)`` pairs instead.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("finite_diff_check needs float64 parameters")
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    if coords is None:
        all_coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
        if n_samples is not None and n_samples < len(all_coords):
            rng = rng or Rng(0)
            pick = rng.gen.choice(len(all_coords), size=n_samples, replace=False)
            all_coords = [all_coords[k] for k in sorted(pick)]
        coords = all_coords

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h_step
            fp = f().item()
            flat[j] = orig - h_step
            fm = f().item()
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("loss is not finite under perturbation")
            num = (fp - fm) / (2 * h_step)
            ana = analytic[i].reshape(-1)[j]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
