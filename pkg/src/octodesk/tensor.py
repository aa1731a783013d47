"""Dense float64 tensors with reverse-mode autodiff over a small fixed op set.

The graph is built eagerly: every op returns a `Tensor` holding its forward
value plus closures for the backward pass. Values are immutable once created;
read-only sharing across threads is safe, graph construction and `backward`
are single-threaded per graph.

Enable `set_debug_checks(True)` (or env var OCTODESK_DEBUG=1) to assert that
every forward op on finite inputs produces finite outputs.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf

NEG_MASK = -1e30  # additive pre-softmax mask value; exp underflows to exact 0.0

_debug_checks = os.environ.get("OCTODESK_DEBUG", "") not in ("", "0")


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the op and shapes."""


class NumericsError(ArithmeticError):
    """Raised in debug mode when a forward op produces NaN/Inf."""


def _shape_err(op, *shapes):
    return ShapeError(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    """One node of the computation graph: value, grad slot, backward closure."""

    __slots__ = ("data", "grad", "parents", "op", "_backward", "requires_grad", "name")

    def __init__(self, data, parents=(), op="leaf", backward=None, requires_grad=False, name=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self.op = op
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name
        if _debug_checks and op != "leaf" and not np.all(np.isfinite(data)):
            raise NumericsError(f"non-finite output of op '{op}'")

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(op={self.op}, shape={self.data.shape}{tag})"


def constant(arr) -> Tensor:
    """Wrap an array as a non-differentiable leaf."""
    return Tensor(np.asarray(arr, dtype=np.float64))


def parameter(arr, name: str) -> Tensor:
    """Wrap an array as a trainable named leaf."""
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else constant(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(node, g):
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += g


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_err("add", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return Tensor(out, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_err("mul", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return Tensor(out, (a, b), "mul", backward)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * s)

    return Tensor(a.data * s, (a,), "scale", backward)


def sub(a, b) -> Tensor:
    return add(a, scale(_as_tensor(b), -1.0))


def matmul(a, b, transpose_b: bool = False) -> Tensor:
    """a @ b (or a @ b^T over the last two axes), with batch broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    bd = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if a.data.shape[-1] != bd.shape[-2]:
        raise _shape_err("matmul", a.shape, b.shape)
    out = np.matmul(a.data, bd)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if transpose_b:
                gb = np.matmul(np.swapaxes(g, -1, -2), a.data)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.shape))

    return Tensor(out, (a, b), "matmul", backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - out * out))

    return Tensor(out, (a,), "tanh", backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def backward(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
            _accum(a, g * (cdf + a.data * pdf))

    return Tensor(out, (a,), "gelu", backward)


def softmax_lastdim(a, additive_mask=None) -> Tensor:
    """Softmax over the last axis with an optional additive mask array.

    Mask entries at or below NEG_MASK yield exactly zero probability. A row
    whose positions are all masked produces an all-zero row (and zero grad).
    """
    a = _as_tensor(a)
    if additive_mask is not None:
        m = np.asarray(additive_mask, dtype=np.float64)
        try:
            y = a.data + m
        except ValueError:
            raise _shape_err("softmax", a.shape, m.shape) from None
        allowed = np.broadcast_to(m > NEG_MASK / 2, y.shape)
    else:
        y = a.data
        allowed = None
    y = y - y.max(axis=-1, keepdims=True)
    e = np.exp(y)
    if allowed is not None:
        e = np.where(allowed, e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    out = e / np.where(denom == 0.0, 1.0, denom)

    def backward(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            _accum(a, out * (g - dot))

    return Tensor(out, (a,), "softmax", backward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise _shape_err("layer_norm", a.shape, gain.shape, bias.shape)
    n = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, n).sum(axis=0))
        if a.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(a, inv * term)

    return Tensor(out, (a, gain, bias), "layer_norm", backward)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of a (V, D) table by an integer id array."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise _shape_err("embedding_lookup", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            _accum(table, gt)

    return Tensor(out, (table,), "embedding_lookup", backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_err("reshape", a.shape, shape) from None

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return Tensor(out, (a,), "reshape", backward)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise _shape_err("concat", *[p.shape for p in parts]) from None
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        offs = np.cumsum([0] + sizes)
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(p, g[tuple(idx)])

    return Tensor(out, tuple(parts), "concat", backward)


def slice_(a, index) -> Tensor:
    """Static slice; `index` is a slice or tuple of slices/ints."""
    a = _as_tensor(a)
    out = a.data[index]
    if out.base is not None:
        out = out.copy()

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[index] += g
            _accum(a, ga)

    return Tensor(out, (a,), "slice", backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if a.requires_grad:
            if axis is None:
                ga = np.full(a.shape, g / n)
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                ga = np.broadcast_to(gg / n, a.shape).copy()
            _accum(a, ga)

    return Tensor(np.asarray(out, dtype=np.float64), (a,), "mean", backward)


def mse_loss(pred, target) -> Tensor:
    """Mean over all elements of (pred - target)^2."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise _shape_err("mse_loss", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size
    out = np.float64((diff * diff).sum() / n)

    def backward(g):
        if pred.requires_grad:
            _accum(pred, g * 2.0 * diff / n)
        if target.requires_grad:
            _accum(target, -g * 2.0 * diff / n)

    return Tensor(out, (pred, target), "mse_loss", backward)


def cross_entropy_with_logits(logits, labels, weight=None) -> Tensor:
    """Softmax cross-entropy over the last axis, averaged over leading positions.

    `labels` is an integer array of shape logits.shape[:-1]. Optional `weight`
    (same shape as labels) reweights positions; the loss is then the weighted
    mean with normalizer sum(weight).
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise _shape_err("cross_entropy", logits.shape, labels.shape)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    if weight is None:
        denom = float(labels.size)
        out = np.float64(-picked.sum() / denom)
        w = None
    else:
        w = np.asarray(weight, dtype=np.float64)
        denom = float(w.sum())
        if denom <= 0:
            raise ValueError("cross_entropy: weight sums to zero")
        out = np.float64(-(picked * w).sum() / denom)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logp)
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
            gl = (p - onehot) / denom
            if w is not None:
                gl = gl * w[..., None]
            _accum(logits, g * gl)

    return Tensor(out, (logits,), "cross_entropy", backward)


def patchify_op(a, patch: int) -> Tensor:
    """(..., H, W, C) -> (..., H*W/P^2, P*P*C); pixel-exact bijection.

    Patches are ordered row-major, top-left to bottom-right; each output row
    is one flattened patch (row-major within the patch, channels innermost).
    """
    a = _as_tensor(a)
    out = patchify(a.data, patch)
    lead = a.shape[:-3]
    h, w, c = a.shape[-3:]

    def backward(g):
        if a.requires_grad:
            _accum(a, unpatchify(g, h, w, c, patch))

    return Tensor(out, (a,), "patchify", backward)


def patchify(img, patch: int):
    """Array version of the patch split (see patchify_op)."""
    img = np.asarray(img)
    *lead, h, w, c = img.shape
    if h % patch or w % patch:
        raise _shape_err("patchify", img.shape, (patch, patch))
    gh, gw = h // patch, w // patch
    x = img.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, P, P, C)
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, patch * patch * c))


def unpatchify(tok, h: int, w: int, c: int, patch: int):
    """Exact inverse of patchify."""
    tok = np.asarray(tok)
    *lead, n, d = tok.shape
    gh, gw = h // patch, w // patch
    if n != gh * gw or d != patch * patch * c:
        raise _shape_err("unpatchify", tok.shape, (h, w, c))
    x = tok.reshape(*lead, gh, gw, patch, patch, c)
    x = np.moveaxis(x, -3, -4)
    return np.ascontiguousarray(x.reshape(*lead, h, w, c))


def patch_conv(img, weight, bias, patch: int) -> Tensor:
    """Strided patch convolution: kernel = stride = patch, i.e. a learned
    linear projection of each flattened patch. weight: (P*P*C, D), bias: (D,)."""
    return add(matmul(patchify_op(img, patch), weight), bias)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every reachable node that requires grad."""
    if np.ndim(loss.data) != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def gradients(loss: Tensor, params) -> dict:
    """Gradient of a scalar loss w.r.t. each named parameter.

    Parameters the loss never touched get exact-zero gradients.
    """
    backward(loss)
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def finite_difference_check(f, x, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    f maps a Tensor leaf to a scalar Tensor. Error per coordinate is
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    leaf = Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True)
    loss = f(leaf)
    backward(loss)
    g_ad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    flat = leaf.data.reshape(-1)
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            pert = flat.copy()
            pert[i] += sign * eps
            val = float(f(Tensor(pert.reshape(leaf.data.shape))).data)
            g_fd[i] += sign * val
    g_fd /= 2.0 * eps
    g_fd = g_fd.reshape(leaf.data.shape)

    denom = np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float((np.abs(g_ad - g_fd) / denom).max())


# ---------------------------------------------------------------------------
# seeded randomness
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fnv1a(s: str) -> int:
    h = 0xCBF29CE484222325
    for byte in s.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


class Rng:
    """Counter-based seeded generator (Philox) with labelled splitting.

    Identical seeds produce identical streams on every platform; child
    generators are derived by mixing the seed with a label hash, so streams
    never depend on draw order elsewhere in the program. Reference test
    vectors live in the README and tests/test_tensor.py.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, label: str) -> "Rng":
        return Rng(_splitmix64(self.seed ^ _fnv1a(label)))

    def spawn(self, index: int) -> "Rng":
        return Rng(_splitmix64(self.seed ^ _splitmix64(index & _MASK64)))

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int):
        return self._gen.permutation(n)
