"""Minimal reverse-mode autodiff over dense float64 arrays.

Only the operations needed by the model and the losses are provided. Shapes
must match exactly; the single exception is a 0-d tensor (or Python number)
combined with a tensor of any shape.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping needed to replay the chain rule."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_counter)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _binary(op: str, a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # undo the scalar-with-tensor expansion
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
                 "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or (a.ndim == 1 and b.ndim == 1):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} vs {b.shape} (use dot for vectors)")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def fn(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 1:
            return b.data @ g, np.outer(a.data, g)
        return np.outer(g, b.data), a.data.T @ g

    return _make(out, (a, b), fn, "matmul")


def dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: shape mismatch {a.shape} vs {b.shape}")
    return _make(np.asarray(a.data @ b.data), (a, b), lambda g: (g * b.data, g * a.data), "dot")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis; all leading dimensions must agree."""
    tensors = [as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead or t.ndim != tensors[0].ndim:
            raise ShapeError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[-1] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=-1))

    return _make(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), fn, "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        _check_same("stack", tensors[0], t)
    return _make(np.stack([t.data for t in tensors]), tuple(tensors),
                 lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a vector into an (n, len) matrix; explicit stand-in for broadcasting."""
    if v.ndim != 1:
        raise ShapeError(f"tile_rows: expected a vector, got {v.shape}")
    return _make(np.tile(v.data, (n, 1)), (v,), lambda g: (g.sum(axis=0),), "tile_rows")


def take(a: Tensor, index) -> Tensor:
    """Select entries (or rows) along axis 0 by integer index or index list."""
    idx = np.asarray(index, dtype=np.int64)

    def fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx].copy(), (a,), fn, "take")


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    norm = np.linalg.norm(a.data, axis=axis, keepdims=True)
    if np.any(norm < 1e-12):
        raise FloatingPointError("l2_normalize: zero-norm input")
    y = a.data / norm

    def fn(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return _make(y, (a,), fn, "l2_normalize")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (a,), fn, "softmax")


def log_sum_exp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    p = e / s

    def fn(g):
        return (np.expand_dims(g, axis) * p,)

    return _make(out, (a,), fn, "log_sum_exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same("maximum", a, b)
    pick_a = a.data >= b.data
    # np.maximum propagates NaN from either side, which np.where on >= would hide
    return _make(np.maximum(a.data, b.data), (a, b),
                 lambda g: (np.where(pick_a, g, 0.0), np.where(pick_a, 0.0, g)), "maximum")


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full_like(a.data, g / n),), "mean")


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, slope * a.data), (a,),
                 lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def _graph(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack_.extend(t._parents)
    # creation order is forward execution order
    nodes.sort(key=lambda t: t._id, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every participating tensor."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    upstream: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in _graph(loss):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            upstream[key] = upstream[key] + pg if key in upstream else np.asarray(pg, dtype=np.float64)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite loss at the base point")
    backward(loss)
    worst = 0.0
    for k, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = float(analytic.reshape(-1)[i])
            if not (np.isfinite(up) and np.isfinite(down) and np.isfinite(ana)):
                raise FloatingPointError(f"grad_check: non-finite value at param {k}, coordinate {i}")
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    for p in params:
        p.grad = None
    return worst
