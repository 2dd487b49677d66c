"""Minimal reverse-mode automatic differentiation over numpy arrays.

A small tape-free (parent-pointer) engine: every op returns a `Tensor`
holding the result plus a closure that routes the output cotangent to the
inputs. `backward()` topologically sorts the graph and accumulates grads.

Only the ops the denoising transformer needs are implemented. Everything
is dtype-preserving, so the same graph runs in float32 for training and
float64 for finite-difference checks.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

# When True, ops skip closure creation (inference mode).
_NO_GRAD = False


@contextlib.contextmanager
def no_grad():
    global _NO_GRAD
    prev = _NO_GRAD
    _NO_GRAD = True
    try:
        yield
    finally:
        _NO_GRAD = prev


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, cotangent=None):
        backward(self, cotangent)


def _wrap(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data, parents, backward_fn):
    if _NO_GRAD or not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, parents=parents, backward_fn=backward_fn, requires_grad=True)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t, g):
    # Never accumulate in place: cotangent arrays may be shared between
    # consumers (e.g. `add` hands the same array to both parents).
    if t.grad is None:
        t.grad = g if g.dtype == t.data.dtype else g.astype(t.data.dtype)
    else:
        t.grad = t.grad + g


def backward(root: Tensor, cotangent=None):
    """Accumulate d(root)/d(leaf) into `.grad` of every reachable leaf."""
    if cotangent is None:
        cotangent = np.ones_like(root.data)
    else:
        cotangent = np.asarray(cotangent, dtype=root.data.dtype)
        if cotangent.shape != root.data.shape:
            raise ValueError(f"cotangent shape {cotangent.shape} != output shape {root.data.shape}")
    topo: list[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    root.grad = cotangent
    for node in reversed(topo):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
            # free intermediate grads early; leaves keep theirs
            if node is not root:
                node.grad = None


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def sub(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def neg(a):
    a = _wrap(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, -g)

    return _make(-a.data, (a,), bwd)


def exp(a):
    a = _wrap(a)
    out_data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * out_data)

    return _make(out_data, (a,), bwd)


def log(a):
    a = _wrap(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def tanh(a):
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bwd)


def silu(a):
    a = _wrap(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(out_data, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximated GELU; the derivative is of the approximation itself."""
    a = _wrap(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out_data = 0.5 * x * (1.0 + t)

    def bwd(g):
        if a.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(out_data, (a,), bwd)


def matmul(a, b):
    """Batched matrix product; batch dims of `a` may broadcast over 2-D `b`."""
    a = _wrap(a)
    b = _wrap(b)
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), bwd)


def linear(x, w, b=None):
    """x @ w (+ b) treating all leading axes of x as batch. w is (D_in, D_out)."""
    x = _wrap(x)
    w = _wrap(w)
    lead = x.data.shape[:-1]
    d_in = x.data.shape[-1]
    x2 = x.data.reshape(-1, d_in)
    out2 = x2 @ w.data
    if b is not None:
        b = _wrap(b)
        out2 = out2 + b.data
    out_data = out2.reshape(*lead, w.data.shape[1])

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.data.shape))
        if w.requires_grad:
            _accum(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, bwd)


def reshape(a, shape):
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), bwd)


def transpose(a, axes):
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(out_data, (a,), bwd)


def getitem(a, idx):
    """Basic (slice/int) indexing. Index regions must not alias."""
    a = _wrap(a)
    out_data = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full)

    return _make(out_data, (a,), bwd)


def concat(parts, axis):
    parts = [_wrap(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(p, g[tuple(sl)])

    return _make(out_data, tuple(parts), bwd)


def stack(parts, axis):
    parts = [_wrap(p) for p in parts]
    out_data = np.stack([p.data for p in parts], axis=axis)

    def bwd(g):
        slices = np.moveaxis(g, axis, 0)
        for p, gp in zip(parts, slices):
            if p.requires_grad:
                _accum(p, np.ascontiguousarray(gp))

    return _make(out_data, tuple(parts), bwd)


def broadcast_to(a, shape):
    a = _wrap(a)
    out_data = np.broadcast_to(a.data, shape).copy()

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))

    return _make(out_data, (a,), bwd)


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            if axis is None:
                _accum(a, np.broadcast_to(g, a.data.shape).copy())
            else:
                gg = g
                if not keepdims:
                    gg = np.expand_dims(g, axis)
                _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(a, axis=-1):
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), bwd)


def layernorm(a, eps=1e-6):
    """Normalize over the last axis; no learnable affine (modulation supplies it)."""
    a = _wrap(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bwd(g):
        if a.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            _accum(a, inv * (g - gm - y * gy))

    return _make(y, (a,), bwd)


def attention(q, k, v):
    """Fused softmax(q k^T / sqrt(d)) v over (B, H, T, d) tensors.

    Uses per-(batch, head) 2-D GEMMs, which outperform np.matmul's batched
    path for these shapes. Attention probabilities are kept for backward.
    """
    q = _wrap(q)
    k = _wrap(k)
    v = _wrap(v)
    B, H, T, d = q.data.shape
    scale = 1.0 / math.sqrt(d)
    dt = q.data.dtype
    probs = np.empty((B, H, T, T), dtype=dt)
    out_data = np.empty((B, H, T, d), dtype=dt)
    scores = np.empty((T, T), dtype=dt)
    for b in range(B):
        for h in range(H):
            np.dot(q.data[b, h], k.data[b, h].T, out=scores)
            scores *= scale
            scores -= scores.max(axis=-1, keepdims=True)
            np.exp(scores, out=scores)
            scores /= scores.sum(axis=-1, keepdims=True)
            probs[b, h] = scores
            np.dot(scores, v.data[b, h], out=out_data[b, h])

    def bwd(g):
        gq = np.empty_like(q.data) if q.requires_grad else None
        gk = np.empty_like(k.data) if k.requires_grad else None
        gv = np.empty_like(v.data) if v.requires_grad else None
        for b in range(B):
            for h in range(H):
                p = probs[b, h]
                gbh = g[b, h]
                if gv is not None:
                    np.dot(p.T, gbh, out=gv[b, h])
                dp = gbh @ v.data[b, h].T
                ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
                ds *= scale
                if gq is not None:
                    np.dot(ds, k.data[b, h], out=gq[b, h])
                if gk is not None:
                    np.dot(ds.T, q.data[b, h], out=gk[b, h])
        if gq is not None:
            _accum(q, gq)
        if gk is not None:
            _accum(k, gk)
        if gv is not None:
            _accum(v, gv)

    out = _make(out_data, (q, k, v), bwd)
    return out


def attention_probs(q, k):
    """Row-stochastic attention matrix (numpy only, for inspection/tests)."""
    q = np.asarray(q)
    k = np.asarray(k)
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = np.einsum("bhid,bhjd->bhij", q, k) * scale
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)
