"""Dense float tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a backward rule on the
output tensor, stamped with a global sequence number.  ``backward`` replays the
recorded operations reachable from the loss in strictly decreasing sequence
order, i.e. the exact reverse of the order in which they were recorded.

Tensors default to 32-bit storage.  Operations preserve the dtype of their
inputs, so a graph built from float64 leaves runs end to end in 64-bit; the
gradient checker relies on this.
"""

import itertools
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, ShapeError, UsageError

_seq = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, optimizer updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


_relu_margin = None


@contextmanager
def relu_margin():
    """Track the smallest |input| any relu sees inside the block.

    Yields a one-element list holding that distance to the kink (inf if no relu ran).
    """
    global _relu_margin
    prev, box = _relu_margin, [np.inf]
    _relu_margin = box
    try:
        yield box
    finally:
        _relu_margin = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise UsageError("division is only supported by python scalars")
        return div_scalar(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, i, j):
        return transpose(self, i, j)

    def sum(self, axis=None, keepdims=False):
        return sum_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_axis(self, axis, keepdims)


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def _node(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_seq)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    # contiguous first: numpy's summation order follows memory layout, and equal
    # values must reduce to equal sums whichever path produced them
    g = np.ascontiguousarray(g)
    lead = g.ndim - len(shape)
    if lead:
        g = g.reshape((-1,) + g.shape[lead:]).sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss):
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad=True")

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

    pending = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            if t.grad is None:
                t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.shape)
            else:
                t.grad += g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    if not isinstance(a, Tensor):
        a = _wrap(a, b)
    b = _wrap(b, a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), back)


def sub(a, b):
    b = _wrap(b, a)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), back)


def mul(a, b):
    b = _wrap(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), back)


def scale(x, s):
    s = float(s)

    def back(g):
        return (g * s,)

    return _node(x.data * s, (x,), back)


def div_scalar(x, s):
    s = float(s)

    def back(g):
        return (g / s,)

    return _node(x.data / s, (x,), back)


def relu(x):
    mask = x.data > 0
    if _relu_margin is not None and x.data.size:
        _relu_margin[0] = min(_relu_margin[0], float(np.abs(x.data).min()))

    def back(g):
        return (g * mask,)

    return _node(np.maximum(x.data, 0), (x,), back)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    """GELU, tanh approximation (GPT-2 convention)."""
    d = x.data
    t = np.tanh(_GELU_C * (d + 0.044715 * (d * d * d)))
    out = 0.5 * d * (1.0 + t)

    def back(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * dt),)

    return _node(out, (x,), back)


# ---------------------------------------------------------------------------
# shape


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def back(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), back)


def transpose(x, i, j):
    def back(g):
        return (np.swapaxes(g, i, j),)

    return _node(np.swapaxes(x.data, i, j), (x,), back)


def contiguous(x):
    """Identity op that materializes a C-ordered copy (fixes memory layout)."""
    return _node(np.ascontiguousarray(x.data), (x,), lambda g: (g,))


def repeat_axis(x, axis, reps):
    """np.repeat along ``axis``: element i appears at positions i*reps .. i*reps+reps-1."""
    axis = axis % x.ndim
    n = x.shape[axis]

    def back(g):
        split = g.shape[:axis] + (n, reps) + g.shape[axis + 1:]
        return (np.ascontiguousarray(g).reshape(split).sum(axis=axis + 1),)

    return _node(np.repeat(x.data, reps, axis=axis), (x,), back)


# ---------------------------------------------------------------------------
# reductions


def sum_axis(x, axis=None, keepdims=False):
    out = np.sum(np.ascontiguousarray(x.data), axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), back)


def mean_axis(x, axis=None, keepdims=False):
    out = np.mean(np.ascontiguousarray(x.data), axis=axis, keepdims=keepdims)
    n = x.data.size // max(np.asarray(out).size, 1)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _node(np.asarray(out, dtype=x.data.dtype), (x,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``.

    When ``b`` is a plain matrix the leading axes of ``a`` are folded into rows,
    so the same rows always go through the same 2-D product regardless of how
    the caller shaped the batch.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: cannot contract {ad.shape} with {bd.shape}")
    if bd.ndim == 2:
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _node(out, (a, b), back)

    try:
        np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {ad.shape} and {bd.shape} do not broadcast") from None
    out = np.matmul(ad, bd)

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), back)


def linear(x, w, b=None):
    """``x @ w + b`` with ``w`` stored as [in, out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax_lastdim(x):
    d = x.data
    if not np.all(np.isfinite(d)):
        raise NumericError("softmax input contains non-finite values")
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), back)


def cross_entropy(logits, targets):
    """Mean token negative log-likelihood; ``targets`` are integer class ids."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= V):
        raise ShapeError(f"cross_entropy: target ids outside [0, {V})")
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(t.size)
    nll = lse[:, 0] - z[rows, t]
    out = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def back(g):
        p = np.exp(z - lse)
        p[rows, t] -= 1
        p *= g / t.size
        return (p.reshape(logits.shape),)

    return _node(out, (logits,), back)


def embedding(table, idx):
    idx = np.asarray(idx)

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _node(table.data[idx], (table,), back)


def layer_norm(x, w, eps=1e-5):
    """LayerNorm over the last axis with a learned scale and no bias."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * w.data

    def back(g):
        gw = (g * xhat).reshape(-1, d.shape[-1]).sum(axis=0) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * w.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _node(out, (x, w), back)


def conv1d_heads(x, w, bias=None):
    """Zero-padded 1-D cross-correlation along the last axis, length preserving.

    x: [N, C_in, L], w: [C_out, C_in, k] with k odd, bias: [C_out] -> [N, C_out, L].
    ``out[n, o, l] = bias[o] + sum_{c, j} w[o, c, j] * xpad[n, c, l + j]``
    with (k - 1) / 2 zeros on each side of the L axis.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d_heads: expected 3-D input and weight, got {x.shape}, {w.shape}")
    N, C, L = x.shape
    O, C2, k = w.shape
    if C2 != C:
        raise ShapeError(f"conv1d_heads: input channels {x.shape} vs weight {w.shape}")
    if k % 2 == 0:
        raise ConfigError(f"conv1d_heads: kernel size must be odd, got {k}", key="kernel_size")
    p = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p))) if p else x.data
    # cols[n*L + l, c*k + j] = xp[n, c, l + j]
    cols = sliding_window_view(xp, k, axis=2).transpose(0, 2, 1, 3).reshape(N * L, C * k)
    wm = w.data.reshape(O, C * k)
    out = (cols @ wm.T).reshape(N, L, O).transpose(0, 2, 1)
    if bias is not None:
        if bias.shape != (O,):
            raise ShapeError(f"conv1d_heads: bias {bias.shape} vs {O} output channels")
        out = out + bias.data[:, None]
    out = np.ascontiguousarray(out)
    parents = (x, w) if bias is None else (x, w, bias)

    def back(g):
        g2 = g.transpose(0, 2, 1).reshape(N * L, O)
        gw = (g2.T @ cols).reshape(O, C, k) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wm).reshape(N, L, C, k)
            gxp = np.zeros((N, C, L + 2 * p), dtype=g.dtype)
            for j in range(k):
                gxp[:, :, j:j + L] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, p:p + L] if p else gxp
        if bias is None:
            return gx, gw
        return gx, gw, np.ascontiguousarray(g).sum(axis=(0, 2))

    return _node(out, parents, back)
