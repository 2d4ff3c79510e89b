"""Dense float64 tensors with tape-style reverse-mode autodiff.

Every op records its parents and a backward closure on the output tensor.
``Tensor.backward`` collects the reachable graph and walks it in exact reverse
creation order, so gradients are deterministic run to run.

Set ``GMHA_DEBUG=1`` (or call :func:`set_debug`) to check every op output for
NaN / +inf.  ``-inf`` is allowed because it is the causal-mask sentinel.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DegenerateRowError, DimensionError, EvaluationError, NumericError

_ids = itertools.count()
_DEBUG = os.environ.get("GMHA_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_ids)

    # -- basics ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {self._id: np.asarray(grad, dtype=np.float64)}
        for node in reversed(ComputeGraph.trace(self).nodes):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def mT(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return mul(tsum(self), 1.0 / self.data.size)


@dataclass
class ComputeGraph:
    """Nodes reachable from a root that take part in differentiation, in creation order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputeGraph":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t._id in seen or not t.requires_grad:
                continue
            seen[t._id] = t
            stack.extend(t._parents)
        return cls(nodes=[seen[k] for k in sorted(seen)])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._id = next(_ids)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    if _DEBUG and (np.isnan(data).any() or np.isposinf(data).any()):
        raise NumericError(f"non-finite output from op '{op}' (shape {data.shape})")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = sigmoid_np(x.data)
    return _make(x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),), "silu")


# -- shape ops ---------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _make(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(data), (a,), backward, "sum")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    if idx.size and (idx.min() < -a.shape[ax] or idx.max() >= a.shape[ax]):
        raise IndexError(f"take index out of range for axis {ax} of size {a.shape[ax]}")

    def backward(g):
        full = np.zeros(a.shape)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0) if idx.ndim == 1 else g)
        return (full,)

    return _make(np.take(a.data, idx, axis=ax), (a,), backward, "take")


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward, "getitem")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return (ga, gb)

    return _make(data, (a, b), backward, "matmul")


# -- normalisation / activations ---------------------------------------------

def softmax_np(m: np.ndarray) -> np.ndarray:
    top = m.max(axis=-1, keepdims=True)
    if np.isneginf(top).any():
        raise DegenerateRowError("softmax row is entirely -inf")
    e = np.exp(m - top)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted.  ``-inf`` entries get weight 0."""
    m = as_tensor(m)
    p = softmax_np(m.data)
    return _make(p, (m,), lambda g: (p * (g - (p * g).sum(axis=-1, keepdims=True)),), "softmax")


def rmsnorm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    x, gamma = as_tensor(x), as_tensor(gamma)
    H = x.shape[-1]
    if gamma.shape != (H,):
        raise DimensionError(f"rmsnorm gamma shape {gamma.shape} does not match hidden size {H}")
    if eps <= 0:
        raise ValueError("rmsnorm eps must be positive")
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data * r

    def backward(g):
        gg = g * gamma.data
        dx = r * gg - x.data * r**3 * np.sum(gg * x.data, axis=-1, keepdims=True) / H
        dgamma = (g * xhat).reshape(-1, H).sum(axis=0)
        return (dx, dgamma)

    return _make(xhat * gamma.data, (x, gamma), backward, "rmsnorm")


def swiglu_ffn(x: Tensor, w1: Tensor, w3: Tensor, w2: Tensor) -> Tensor:
    """(silu(x w1) * (x w3)) w2, no biases."""
    H = x.shape[-1]
    F = w1.shape[-1]
    if w1.shape != (H, F) or w3.shape != (H, F) or w2.shape != (F, H):
        raise DimensionError(
            f"swiglu shapes disagree: x {x.shape}, w1 {w1.shape}, w3 {w3.shape}, w2 {w2.shape}"
        )
    return matmul(mul(silu(matmul(x, w1)), matmul(x, w3)), w2)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean next-token negative log-likelihood; ``logits`` is (..., V)."""
    logits = as_tensor(logits)
    V = logits.shape[-1]
    t = np.asarray(targets, dtype=np.intp).reshape(-1)
    z = logits.data.reshape(-1, V)
    if t.shape[0] != z.shape[0]:
        raise DimensionError(f"{z.shape[0]} logit rows but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"target out of range [0, {V})")
    top = z.max(axis=-1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(z - top).sum(axis=-1))
    rows = np.arange(z.shape[0])
    loss = np.mean(lse - z[rows, t])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return ((g * p / z.shape[0]).reshape(logits.shape),)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")


# -- rotary embedding ---------------------------------------------------------

def rope_angles(positions, dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    if dim % 2:
        raise DimensionError(f"rotary embedding needs an even dimension, got {dim}")
    if base <= 1:
        raise ValueError("rotary base must exceed 1")
    inv = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def rope_np(x: np.ndarray, positions, base: float) -> np.ndarray:
    """Rotate interleaved pairs of ``x`` (..., T, D) by position-dependent angles."""
    cos, sin = rope_angles(positions, x.shape[-1], base)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


def rope_apply(x: Tensor, positions, base: float = 500000.0) -> Tensor:
    x = as_tensor(x)
    positions = np.asarray(positions)
    if positions.shape != (x.shape[-2],):
        raise DimensionError(f"{positions.shape} positions for {x.shape[-2]} rows")
    cos, sin = rope_angles(positions, x.shape[-1], base)

    def backward(g):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        dx = np.empty_like(g)
        dx[..., 0::2] = g1 * cos + g2 * sin
        dx[..., 1::2] = -g1 * sin + g2 * cos
        return (dx,)

    return _make(rope_np(x.data, positions, base), (x,), backward, "rope")


# -- verification harness ------------------------------------------------------

def finite_diff_gradcheck(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> float:
    """Max relative error between autodiff and central differences over all entries.

    ``f`` maps a dict of Tensors to a scalar Tensor.  ``params`` arrays are
    perturbed in place and restored.
    """
    if not 0 < step <= 1e-2:
        raise ValueError("step must lie in (0, 1e-2]")
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    f(leaves).backward()
    worst = 0.0
    for name, arr in params.items():
        auto = leaves[name].grad
        if auto is None:
            auto = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(f, params)
            flat[i] = orig - step
            fm = _scalar(f, params)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise EvaluationError(f"non-finite objective when perturbing {name}[{i}]")
            num = (fp - fm) / (2 * step)
            worst = max(worst, abs(auto.reshape(-1)[i] - num) / (abs(num) + 1e-8))
    return worst


def _scalar(f, params) -> float:
    return float(f({k: Tensor(v) for k, v in params.items()}).data)
