"""Reverse-mode automatic differentiation over a small fixed operator set.

A :class:`Tensor` wraps a float64 ndarray and remembers how it was produced.
Calling :func:`backward` on a scalar loss walks the recorded graph in reverse
topological order and accumulates gradients into every reachable leaf.

The operator set is exactly what the sequence models need: matmul, add, mul,
tanh, sigmoid, column slice/concat, embedding gather, step stacking, batched
attention products, (masked) softmax, and the two cross-entropy losses.
Inference code runs the same ops inside :func:`no_grad`, which skips graph
construction so the numerics are identical with no bookkeeping cost.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (forward values unchanged)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("value", "grad", "parents", "_backward", "name")

    def __init__(self, value, parents=(), backward=None, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple = parents if _GRAD_ENABLED else ()
        self._backward = backward if _GRAD_ENABLED else None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, name={self.name!r})"


def parameter(value, name: str = "") -> Tensor:
    """A leaf tensor that participates in gradient accumulation."""
    t = Tensor(np.array(value, dtype=np.float64))
    t.name = name
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def backward(root: Tensor) -> None:
    """Backpropagate from ``root`` (any shape; seed gradient is all-ones)."""
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_val = a.value @ b.value

    def bwd(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return Tensor(out_val, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; ``b`` may be a 1-D bias broadcast over rows of ``a``."""
    out_val = a.value + b.value

    def bwd(g):
        _accum(a, g)
        if b.value.ndim < g.ndim:
            _accum(b, g.sum(axis=tuple(range(g.ndim - b.value.ndim))))
        else:
            _accum(b, g)

    return Tensor(out_val, (a, b), bwd)


def add_n(tensors: list[Tensor]) -> Tensor:
    out_val = sum(t.value for t in tensors)

    def bwd(g):
        for t in tensors:
            _accum(t, g)

    return Tensor(out_val, tuple(tensors), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_val = a.value * b.value

    def bwd(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return Tensor(out_val, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        _accum(a, g * c)

    return Tensor(a.value * c, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_val = np.tanh(a.value)

    def bwd(g):
        _accum(a, g * (1.0 - out_val**2))

    return Tensor(out_val, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out_val = 1.0 / (1.0 + np.exp(-a.value))

    def bwd(g):
        _accum(a, g * out_val * (1.0 - out_val))

    return Tensor(out_val, (a,), bwd)


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    out_val = a.value[..., j0:j1]

    def bwd(g):
        full = np.zeros_like(a.value)
        full[..., j0:j1] = g
        _accum(a, full)

    return Tensor(out_val, (a,), bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    out_val = np.concatenate([p.value for p in parts], axis=-1)
    widths = [p.value.shape[-1] for p in parts]

    def bwd(g):
        j = 0
        for p, w in zip(parts, widths):
            _accum(p, g[..., j : j + w])
            j += w

    return Tensor(out_val, tuple(parts), bwd)


def rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding gather: select ``table`` rows by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.intp)
    out_val = table.value[ids]

    def bwd(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids, g)
        _accum(table, full)

    return Tensor(out_val, (table,), bwd)


def stack_steps(steps: list[Tensor]) -> Tensor:
    """Stack T tensors of shape (B, m) into (B, T, m)."""
    out_val = np.stack([s.value for s in steps], axis=1)

    def bwd(g):
        for i, s in enumerate(steps):
            _accum(s, g[:, i, :])

    return Tensor(out_val, tuple(steps), bwd)


def attn_scores(q: Tensor, keys: Tensor) -> Tensor:
    """Batched dot products: q (B, m) x keys (B, T, m) -> scores (B, T)."""
    out_val = np.einsum("bm,btm->bt", q.value, keys.value)

    def bwd(g):
        _accum(q, np.einsum("bt,btm->bm", g, keys.value))
        _accum(keys, np.einsum("bt,bm->btm", g, q.value))

    return Tensor(out_val, (q, keys), bwd)


def attn_context(weights: Tensor, values: Tensor) -> Tensor:
    """Weighted sum: weights (B, T) x values (B, T, m) -> context (B, m)."""
    out_val = np.einsum("bt,btm->bm", weights.value, values.value)

    def bwd(g):
        _accum(weights, np.einsum("bm,btm->bt", g, values.value))
        _accum(values, np.einsum("bt,bm->btm", weights.value, g))

    return Tensor(out_val, (weights, values), bwd)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (same shape, additive, constant)
    is applied to the logits first; use -inf-like values to exclude positions."""
    x = a.value if mask is None else a.value + mask
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out_val = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out_val).sum(axis=-1, keepdims=True)
        _accum(a, (g - dot) * out_val)

    return Tensor(out_val, (a,), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum of softmax cross-entropy terms.

    logits (B, V), integer labels (B,), per-row weights (B,). Returns a scalar
    tensor equal to sum_i w_i * (logsumexp(logits_i) - logits_i[label_i]).
    """
    labels = np.asarray(labels, dtype=np.intp)
    weights = np.asarray(weights, dtype=np.float64)
    x = logits.value
    xmax = x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x - xmax).sum(axis=-1)) + xmax[:, 0]
    picked = x[np.arange(x.shape[0]), labels]
    out_val = float(np.sum(weights * (lse - picked)))
    probs = np.exp(x - xmax)
    probs /= probs.sum(axis=-1, keepdims=True)

    def bwd(g):
        d = probs * weights[:, None]
        d[np.arange(x.shape[0]), labels] -= weights
        _accum(logits, d * g)

    return Tensor(out_val, (logits,), bwd)


def binary_cross_entropy_logits(z: Tensor, labels: np.ndarray) -> Tensor:
    """Sum of logistic losses: z (B,) raw scores, labels (B,) in {0, 1}."""
    labels = np.asarray(labels, dtype=np.float64)
    x = z.value
    # log(1 + exp(x)) - y*x, computed stably
    out_val = float(np.sum(np.maximum(x, 0) - x * labels + np.log1p(np.exp(-np.abs(x)))))
    sig = 1.0 / (1.0 + np.exp(-x))

    def bwd(g):
        _accum(z, (sig - labels) * g)

    return Tensor(out_val, (z,), bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """ADAM with global gradient-norm clipping applied before each update."""

    def __init__(self, params: list[Tensor], lr: float = 0.002, clip: float = 5.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.clip = clip
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.last_grad_norm = 0.0  # after clipping

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value)
                 for p in self.params]
        norm = float(np.sqrt(sum(float((g**2).sum()) for g in grads)))
        if self.clip > 0 and norm > self.clip:
            factor = self.clip / norm
            grads = [g * factor for g in grads]
            norm = self.clip
        self.last_grad_norm = norm
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
