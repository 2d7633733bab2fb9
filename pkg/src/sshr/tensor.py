"""Dense tensors with reverse-mode automatic differentiation.

Values are plain numpy arrays: float32 for training, float64 for
verification paths (operations preserve the dtype of their inputs). Each
operation returns a new Tensor that remembers its parents and a closure
producing the parents' gradient contributions, so the computation record
is the topologically ordered set of tensors reachable from a root.
Gradients accumulate into ``.grad`` of every tensor built with
``requires_grad=True``; callers zero grads between steps.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, NonFiniteError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """A numpy array plus an optional gradient slot and graph linkage.

    Values are immutable by convention once created by an op; only ``grad``
    is mutated afterwards. Every forward op validates that its output is
    finite, so NaN/Inf surfaces at the op that produced it.
    """

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward", "_needs_grad")

    def __init__(self, values, requires_grad=False, name=None, _parents=(), _backward=None):
        v = np.asarray(values)
        if not np.isfinite(v).all():
            raise NonFiniteError(f"non-finite values in tensor {name or '<anonymous>'}")
        self.values = v
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._needs_grad = requires_grad or bool(_parents)

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, name={self.name!r})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def param(values, name):
    """A leaf tensor that collects gradients (a trainable parameter)."""
    return Tensor(values, requires_grad=True, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _op(values, parents, backward_fn):
    if _GRAD_ENABLED and any(p._needs_grad for p in parents):
        return Tensor(values, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(values)


def linearize(root: Tensor) -> list[Tensor]:
    """The computation record: tensors reachable from ``root``, inputs first.

    Deterministic for a fixed graph, so replaying it yields bitwise
    identical gradients.
    """
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, seed=None, record: list[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from ``root``; returns the full gradient flow.

    ``seed`` must match the root's shape (defaults to ones). Gradients are
    *added* into ``.grad`` of every requires_grad tensor, so repeated calls
    accumulate; the returned dict maps each reached tensor to the gradient
    of this sweep alone.
    """
    if seed is None:
        seed = np.ones_like(root.values)
    seed = np.asarray(seed, dtype=root.values.dtype)
    if seed.shape != root.values.shape:
        raise ConfigError(f"seed shape {seed.shape} does not match output shape {root.values.shape}")
    if record is None:
        record = linearize(root)
    flow: dict[Tensor, np.ndarray] = {root: seed.copy()}
    for node in reversed(record):
        g = flow.get(node)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent._needs_grad:
                continue
            buf = flow.get(parent)
            if buf is None:
                flow[parent] = np.array(pg, dtype=parent.values.dtype)
            else:
                buf += pg
    for node, g in flow.items():
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
    return flow


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a, b) -> Tensor:
    """Matrix product of two rank-2 tensors (BLAS underneath)."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2:
        raise ConfigError(f"matmul expects matrices, got ranks {av.ndim} and {bv.ndim}")
    if av.shape[1] != bv.shape[0]:
        raise ConfigError(f"matmul inner dimensions differ: {av.shape} @ {bv.shape}")

    def backward_fn(g):
        return g @ bv.T, av.T @ g

    return _op(av @ bv, (a, b), backward_fn)


def linear(x, w, b) -> Tensor:
    """Affine map ``x @ w + b`` with the bias broadcast over rows."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    xv, wv, bv = x.values, w.values, b.values
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ConfigError(f"linear shapes incompatible: {xv.shape} @ {wv.shape}")
    if bv.shape != (wv.shape[1],):
        raise ConfigError(f"linear bias shape {bv.shape} does not match output width {wv.shape[1]}")

    def backward_fn(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _op(xv @ wv + bv, (x, w, b), backward_fn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.shape != b.values.shape:
        raise ConfigError(f"add shapes differ: {a.values.shape} vs {b.values.shape}")

    def backward_fn(g):
        return g, g

    return _op(a.values + b.values, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.shape != b.values.shape:
        raise ConfigError(f"mul shapes differ: {a.values.shape} vs {b.values.shape}")
    av, bv = a.values, b.values

    def backward_fn(g):
        return g * bv, g * av

    return _op(av * bv, (a, b), backward_fn)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def backward_fn(g):
        return (g * c,)

    return _op(a.values * c, (a,), backward_fn)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    av = a.values

    def backward_fn(g):
        return (np.full(av.shape, float(g), dtype=av.dtype),)

    return _op(av.sum(), (a,), backward_fn)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.values)

    def backward_fn(g):
        return (g * out,)

    return _op(out, (a,), backward_fn)


def gelu(a) -> Tensor:
    """GELU through the tanh approximation:

    ``0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))``
    """
    a = _as_tensor(a)
    xv = a.values
    k = math.sqrt(2.0 / math.pi)
    c = 0.044715
    inner = k * (xv + c * (xv * xv * xv))  # x*x*x: float32 pow is slow
    t = np.tanh(inner)

    def backward_fn(g):
        d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * k * (1.0 + 3.0 * c * xv * xv)
        return (g * d,)

    return _op(0.5 * xv * (1.0 + t), (a,), backward_fn)


def log_softmax_rows(x) -> Tensor:
    """Row-wise log-softmax with max subtraction.

    Internally evaluated in float64 so that every output row logsumexps to
    zero within 1e-6 even when the stored dtype is float32.
    """
    x = _as_tensor(x)
    xv = x.values
    if xv.ndim != 2:
        raise ConfigError(f"log_softmax_rows expects a matrix, got rank {xv.ndim}")
    x64 = xv.astype(np.float64)
    m = x64.max(axis=1, keepdims=True)
    z = x64 - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out64 = z - lse
    soft = np.exp(out64)

    def backward_fn(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _op(out64.astype(xv.dtype), (x,), backward_fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    xv, gv, bv = x.values, gain.values, bias.values
    if xv.ndim != 2 or xv.shape[1] < 1:
        raise ConfigError(f"layer_norm expects a T x H matrix, got shape {xv.shape}")
    if gv.shape != (xv.shape[1],) or bv.shape != (xv.shape[1],):
        raise ConfigError("layer_norm gain/bias width mismatch")
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv

    def backward_fn(g):
        dgain = (g * xh).sum(axis=0)
        dbias = g.sum(axis=0)
        dxh = g * gv
        dx = inv * (dxh - dxh.mean(axis=1, keepdims=True) - xh * (dxh * xh).mean(axis=1, keepdims=True))
        return dx, dgain, dbias

    return _op(xh * gv + bv, (x, gain, bias), backward_fn)


def mean_over_time(x) -> Tensor:
    """Arithmetic mean of the rows of a T x H matrix; yields an H-vector."""
    x = _as_tensor(x)
    xv = x.values
    if xv.ndim != 2 or xv.shape[0] < 1:
        raise ConfigError(f"mean_over_time needs at least one row, got shape {xv.shape}")
    t = xv.shape[0]

    def backward_fn(g):
        return (np.broadcast_to(g / t, xv.shape),)

    return _op(xv.mean(axis=0), (x,), backward_fn)


def prepend_row(row, x) -> Tensor:
    """Stack an H-vector on top of a T x H matrix, giving (T+1) x H."""
    row, x = _as_tensor(row), _as_tensor(x)
    rv, xv = row.values, x.values
    if rv.ndim != 1 or xv.ndim != 2 or rv.shape[0] != xv.shape[1]:
        raise ConfigError(f"prepend_row width mismatch: {rv.shape} onto {xv.shape}")

    def backward_fn(g):
        return g[0], g[1:]

    return _op(np.concatenate([rv[None, :], xv], axis=0), (row, x), backward_fn)


def multi_head_attention(q, k, v, n_heads: int) -> Tensor:
    """Scaled dot-product attention over projected q/k/v of width H.

    Heads are split from the feature axis; the output has the query's
    length and width H. The whole head computation carries one hand-derived
    gradient rule, which keeps the record short.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    qv, kv, vv = q.values, k.values, v.values
    if qv.ndim != 2 or kv.ndim != 2 or vv.ndim != 2:
        raise ConfigError("attention operands must be matrices")
    h = qv.shape[1]
    if kv.shape[1] != h or vv.shape[1] != h or kv.shape[0] != vv.shape[0]:
        raise ConfigError(f"attention shapes incompatible: q{qv.shape} k{kv.shape} v{vv.shape}")
    if h % n_heads != 0:
        raise ConfigError(f"width {h} not divisible by {n_heads} heads")
    d = h // n_heads
    tq, tk = qv.shape[0], kv.shape[0]
    qh = qv.reshape(tq, n_heads, d).transpose(1, 0, 2)
    kh = kv.reshape(tk, n_heads, d).transpose(1, 0, 2)
    vh = vv.reshape(tk, n_heads, d).transpose(1, 0, 2)
    inv_sqrt_d = 1.0 / math.sqrt(d)
    scores = (qh @ kh.transpose(0, 2, 1)) * inv_sqrt_d
    scores -= scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=2, keepdims=True)
    z = attn @ vh

    def backward_fn(g):
        gz = g.reshape(tq, n_heads, d).transpose(1, 0, 2)
        ga = gz @ vh.transpose(0, 2, 1)
        gvh = attn.transpose(0, 2, 1) @ gz
        gs = attn * (ga - (ga * attn).sum(axis=2, keepdims=True))
        gs *= inv_sqrt_d
        gqh = gs @ kh
        gkh = gs.transpose(0, 2, 1) @ qh
        gq = gqh.transpose(1, 0, 2).reshape(tq, h)
        gk = gkh.transpose(1, 0, 2).reshape(tk, h)
        gv = gvh.transpose(1, 0, 2).reshape(tk, h)
        return gq, gk, gv

    return _op(z.transpose(1, 0, 2).reshape(tq, h), (q, k, v), backward_fn)


def sinusoidal_positions(length: int, width: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos positional table of shape length x width."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(width, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / width)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)
