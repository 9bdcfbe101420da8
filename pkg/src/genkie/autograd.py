"""A small tensor-level reverse-mode autodiff engine over numpy arrays.

Only the operators the model needs are provided. Each op computes its value
eagerly and, when any input requires a gradient, records a closure that maps
the output gradient to input gradients. ``Tensor.backward`` walks the graph in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
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
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior gradients are not needed after propagation
                    node.grad = None

    # sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _make(a.data * b.data, (a, b), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        x._accum(g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner))

    return _make(out, (x,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    # one random byte per element; p is quantized to 1/256
    thr = int(round(p * 256))
    if thr <= 0:
        return x
    bits = np.frombuffer(rng.bytes(x.data.size), dtype=np.uint8).reshape(x.data.shape)
    keep = (bits >= thr).astype(x.data.dtype) * (256.0 / (256 - thr))

    def bw(g):
        x._accum(g * keep)

    return _make(x.data * keep, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a (..., m, k) and b either (k, n) or (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2:
                k = a.data.shape[-1]
                b._accum(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accum(np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with w (k, n); fused to keep the graph small."""
    k = x.data.shape[-1]
    x2 = x.data.reshape(-1, k)
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*x.data.shape[:-1], w.data.shape[1])

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accum((g2 @ w.data.T).reshape(x.data.shape))
        if w.requires_grad:
            w._accum(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accum(g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# normalisation / probabilities

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.reshape(-1, xd.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            n = xd.shape[-1]
            x._accum(inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True)))

    return _make(out, (x, gamma, beta), bw)


def softmax(x: Tensor, bias: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """softmax(x + bias); ``bias`` is a constant (e.g. a -inf-like attention mask)."""
    z = x.data if bias is None else x.data + bias
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), bw)


def log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Weighted mean token NLL; ``logits`` (..., V), ``targets``/``weights`` (...).

    With ``smoothing`` > 0 the target distribution puts ``smoothing`` mass
    uniformly over the vocabulary.
    """
    V = logits.data.shape[-1]
    z = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    w = weights.reshape(-1).astype(z.dtype)
    denom = max(float(w.sum()), 1.0)
    lp = log_softmax_np(z)
    rows = np.arange(len(t))
    nll = -lp[rows, t]
    if smoothing:
        nll = (1.0 - smoothing) * nll - smoothing * lp.mean(axis=-1)
    loss = (nll * w).sum() / denom

    def bw(g):
        p = np.exp(lp)
        if smoothing:
            p -= smoothing / V
            p[rows, t] -= 1.0 - smoothing
        else:
            p[rows, t] -= 1.0
        logits._accum((p * (w[:, None] * (float(g) / denom))).reshape(logits.data.shape).astype(z.dtype))

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# indexing / shape

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table._accum(gt)

    return _make(out, (table,), bw)


def gather(x: Tensor, idx: np.ndarray, axis: int = 1) -> Tensor:
    """``np.take(x, idx, axis)``; the scatter-add backward handles repeated indices."""
    out = np.take(x.data, idx, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        gm = np.moveaxis(gx, axis, 0)
        gg = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(gm, idx.reshape(-1), gg.reshape(-1, *gm.shape[1:]))
        x._accum(gx)

    return _make(out, (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g):
        x._accum(g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        x._accum(np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.data.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for x, a, b in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(a, b)
                x._accum(g[tuple(sl)])

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        x._accum(np.broadcast_to(g, x.data.shape).copy())

    return _make(np.asarray(x.data.sum()), (x,), bw)
