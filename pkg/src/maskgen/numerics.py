"""Reverse-mode autodiff over float64 numpy arrays.

Only the handful of operations the transformer needs are provided. A
``Tensor`` produced from at least one tracked input records a closure that
maps the output gradient to input gradients; ``backward`` replays those
closures in reverse topological order.

Intermediate gradients live only for the duration of one ``backward`` call.
Leaf gradients accumulate across calls until ``zero_grad``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", tracked" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar; all of these route through the functions below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def _make(data: np.ndarray, op: str, parents: tuple, backward: Callable) -> Tensor:
    tracked = any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def _bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, "sub", (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), _bw)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def _bw(g):
        return (g * c,)

    return _make(out, "scale", (a,), _bw)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(GELU_C * (xd + 0.044715 * x2 * xd))
    out = 0.5 * xd * (1.0 + t)

    def _bw(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * d,)

    return _make(out, "gelu", (x,), _bw)


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a one-element tensor."""
    out = np.array([x.data.sum()])

    def _bw(g):
        return (np.full(x.shape, g.reshape(-1)[0]),)

    return _make(out, "sum", (x,), _bw)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def _bw(g):
        return (g.reshape(x.shape),)

    return _make(out, "reshape", (x,), _bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def _bw(g):
        return (g.transpose(inverse),)

    return _make(out, "transpose", (x,), _bw)


def take(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing: slices and integers."""
    out = x.data[index]
    if out.ndim == 0:
        out = out.reshape(1)

    def _bw(g):
        full = np.zeros(x.shape)
        full[index] = g.reshape(full[index].shape)
        return (full,)

    return _make(np.array(out), "take", (x,), _bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", tuple(parts), _bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup. Repeated ids accumulate into the same table row."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError(f"ids must be one-dimensional, got shape {ids.shape}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(ids[(ids < 0) | (ids >= n)][0])
        raise IndexError(f"id {bad} out of range for table with {n} rows")
    out = table.data[ids]

    def _bw(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids, g)
        return (full,)

    return _make(out, "embedding", (table,), _bw)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading batch axes (equal on both sides) are allowed."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2] \
            or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def _bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(out, "matmul", (a, b), _bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, "softmax", (x,), _bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"gamma/beta must have shape ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.sum(axis=-1, keepdims=True) / d
    xc = x.data - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def _bw(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.sum(axis=-1, keepdims=True) / d
                    - xhat * ((gx * xhat).sum(axis=-1, keepdims=True) / d))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, "layer_norm", (x, gamma, beta), _bw)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a single logit vector."""
    z = logits.data.reshape(-1)
    v = z.size
    if not 0 <= target < v:
        raise IndexError(f"target {target} out of range for {v} classes")
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    out = np.array([lse - z[target]])

    def _bw(g):
        p = np.exp(z - lse)
        p[target] -= 1.0
        return ((g.reshape(-1)[0] * p).reshape(logits.shape),)

    return _make(out, "cross_entropy", (logits,), _bw)


def sum_scalars(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    if not terms:
        raise ValueError("nothing to sum")
    out = np.array([sum(float(t.data.reshape(-1)[0]) for t in terms)])

    def _bw(g):
        return tuple(g.reshape(t.shape) for t in terms)

    return _make(out, "sum_scalars", tuple(terms), _bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf reachable from ``root``."""
    if not root.requires_grad:
        raise ValueError("backward() called on an untracked tensor")
    if root.data.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
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


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar from the current contents of ``params`` each
    time it is called. Relative error per coordinate is
    ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        p.zero_grad()
    root = f()
    if not np.isfinite(root.data).all():
        raise FloatingPointError("function value is not finite")
    backward(root)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise FloatingPointError("function value is not finite")
            numeric = (hi - lo) / (2.0 * step)
            a = float(aflat[i])
            err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
