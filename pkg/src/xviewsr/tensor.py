"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives needed by the attention and U-Net code are provided.
Every op records itself on creation (monotone sequence id); ``backward``
replays the recorded ops in reverse execution order.
"""
from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

from .exceptions import ContractError, DimensionError

__all__ = [
    "Tensor", "Graph", "no_grad", "is_grad_enabled", "as_tensor",
    "add", "sub", "mul", "neg", "scale", "matmul", "relu", "abs_",
    "sum_axis", "mean", "reshape", "transpose", "concat", "stack",
    "conv2d", "conv2d_blocked", "softmax_stable", "layer_norm",
    "bilinear_resize", "resize_matrix", "avg_pool2", "pad_reflect",
    "l1_loss", "grad_check",
]

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """n-d float64 array plus an optional gradient and its recording node."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None
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
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``."""
        if grad is None:
            if self.size != 1:
                raise ContractError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        Graph.from_output(self).backward(self, np.asarray(grad, dtype=np.float64))

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Graph:
    """Ordered record of the ops that produced an output.

    Nodes are sorted by creation sequence, which is execution order; backward
    walks the list in reverse.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [t.op for t in self.nodes if t.op is not None]

    def backward(self, out, seed):
        grads = {id(out): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def abs_(x):
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


# ---------------------------------------------------------------- reductions

def sum_axis(x, axis=None, keepdims=False):
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_axis(x, axis, keepdims), 1.0 / n)


def l1_loss(a, b):
    """Mean absolute error between two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l1_loss: shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size
    sign = np.sign(d)

    def backward(g):
        ga = sign * (float(np.sum(g)) / n)
        return ga, -ga

    return _make(np.array(np.abs(d).sum() / n), (a, b), backward, "l1_loss")


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def _getitem(x, index):
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    data = np.stack([t.data for t in tensors], axis=axis)
    return _make(data, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))), "stack")


def _reflect_matrix(n, before, after):
    if before >= n or after >= n:
        raise DimensionError(f"reflect pad of {before}/{after} needs extent > pad, got {n}")
    idx = np.arange(-before, n + after)
    idx = np.abs(idx)
    idx = np.where(idx > n - 1, 2 * (n - 1) - idx, idx)
    m = np.zeros((idx.size, n))
    m[np.arange(idx.size), idx] = 1.0
    return m


def pad_reflect(x, pads):
    """Reflect-pad the last two axes by (top, bottom, left, right)."""
    top, bottom, left, right = pads
    if not any(pads):
        return x
    mh = _reflect_matrix(x.shape[-2], top, bottom)
    mw = _reflect_matrix(x.shape[-1], left, right)
    out = mh @ x.data @ mw.T
    return _make(out, (x,), lambda g: (mh.T @ g @ mw,), "pad_reflect")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), backward, "matmul")


def _conv_checks(x, w, b, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects input [B,C,H,W] and weight [O,C,k,k]")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    k = w.shape[2]
    if w.shape[3] != k or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {w.shape[2:]}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
    if padding < 0:
        raise DimensionError("conv2d: negative padding")
    return k


def _zero_pad(a, p):
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_forward_direct(xp, w, ho, wo):
    # explicit correlation, offsets accumulated in fixed (i, j) order
    k = w.shape[2]
    xl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # B,H,W,C
    out = np.zeros((xp.shape[0], ho, wo, w.shape[0]))
    for i in range(k):
        for j in range(k):
            out += xl[:, i:i + ho, j:j + wo, :] @ w[:, :, i, j].T
    return out.transpose(0, 3, 1, 2)


def _conv_forward_blocked(xp, w, ho, wo, block_rows):
    # im2col over blocks of output rows
    k = w.shape[2]
    wmat = w.reshape(w.shape[0], -1)  # O, C*k*k
    out = np.empty((xp.shape[0], w.shape[0], ho, wo))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))  # B,C,ho,wo,k,k
    for r0 in range(0, ho, block_rows):
        r1 = min(ho, r0 + block_rows)
        cols = windows[:, :, r0:r1].transpose(0, 2, 3, 1, 4, 5).reshape(xp.shape[0], r1 - r0, wo, -1)
        out[:, :, r0:r1] = (cols @ wmat.T).transpose(0, 3, 1, 2)
    return out


def _conv(x, w, b, padding, forward, op):
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    k = _conv_checks(x, w, b, padding)
    xp = _zero_pad(x.data, padding)
    ho = xp.shape[2] - k + 1
    wo = xp.shape[3] - k + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {x.shape[2:]} smaller than kernel {k}")
    out = forward(xp, w.data, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]
    wd = w.data

    def backward(g):
        gl = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # B,ho,wo,O
        xl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # B,Hp,Wp,C
        gx = np.zeros_like(xl)
        gw = np.empty_like(wd)
        for i in range(k):
            for j in range(k):
                win = xl[:, i:i + ho, j:j + wo, :]
                gw[:, :, i, j] = np.tensordot(gl, win, axes=([0, 1, 2], [0, 1, 2]))
                gx[:, i:i + ho, j:j + wo, :] += gl @ wd[:, :, i, j]
        gx = gx.transpose(0, 3, 1, 2)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, backward, op)


def conv2d(x, w, b=None, padding=0):
    """2-D cross-correlation, input [B,C,H,W], weight [O,C,k,k], zero padding."""
    return _conv(x, w, b, padding, _conv_forward_direct, "conv2d")


def conv2d_blocked(x, w, b=None, padding=0, block_rows=4):
    """Same contract as :func:`conv2d`; forward runs as im2col over row blocks."""
    fwd = lambda xp, wd, ho, wo: _conv_forward_blocked(xp, wd, ho, wo, block_rows)  # noqa: E731
    return _conv(x, w, b, padding, fwd, "conv2d_blocked")


# ---------------------------------------------------------------- normalisation

def softmax_stable(x, axis=-1):
    """Softmax computed as exp(x - max) / sum along ``axis``."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    s = softmax_np(x.data, axis)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def softmax_np(a, axis=-1):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("softmax received non-finite input")
    e = np.exp(a - np.max(a, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm_np(a, axis=-1, eps=1e-5):
    mu = np.mean(a, axis=axis, keepdims=True)
    xc = a - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def layer_norm(x, axis=-1, eps=1e-5):
    """Zero-mean / unit-variance normalisation along ``axis``; no affine."""
    x = as_tensor(x)
    if x.shape[axis] < 2:
        raise DimensionError("layer_norm needs at least 2 elements along the normalised axis")
    y, inv = layer_norm_np(x.data, axis, eps)

    def backward(g):
        gm = np.mean(g, axis=axis, keepdims=True)
        gym = np.mean(g * y, axis=axis, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y, (x,), backward, "layer_norm")


# ---------------------------------------------------------------- resampling

def resize_matrix(n_in, n_out):
    """Align-corners linear interpolation: source index lo and weight t per output."""
    if n_out < 1:
        raise DimensionError("resize target must be >= 1")
    if n_in == 1 or n_out == 1:
        return np.zeros(n_out, dtype=np.intp), np.zeros(n_out)
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(np.intp), n_in - 2)
    return lo, src - lo


def _lerp_axis(a, lo, t, axis):
    if a.shape[axis] == 1:
        return np.repeat(a, lo.size, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = t.size
    t = t.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - t) + np.take(a, lo + 1, axis=axis) * t


def _lerp_axis_T(g, lo, t, n_in, axis):
    shape = list(g.shape)
    shape[axis] = n_in
    out = np.zeros(shape)
    gm = np.moveaxis(g, axis, 0)
    om = np.moveaxis(out, axis, 0)
    if n_in == 1:
        om[0] = gm.sum(axis=0)
        return out
    tb = t.reshape((-1,) + (1,) * (gm.ndim - 1))
    np.add.at(om, lo, gm * (1.0 - tb))
    np.add.at(om, lo + 1, gm * tb)
    return out


def bilinear_resize(x, out_h, out_w):
    """Align-corners bilinear resize of the last two axes (rows first, then columns)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise DimensionError("bilinear_resize target extents must be >= 1")
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    lo_h, t_h = resize_matrix(h, out_h)
    lo_w, t_w = resize_matrix(w, out_w)
    rows = _lerp_axis(x.data, lo_h, t_h, x.ndim - 2)
    out = _lerp_axis(rows, lo_w, t_w, x.ndim - 1)

    def backward(g):
        gr = _lerp_axis_T(g, lo_w, t_w, w, g.ndim - 1)
        return (_lerp_axis_T(gr, lo_h, t_h, h, g.ndim - 2),)

    return _make(out, (x,), backward, "bilinear_resize")


def avg_pool2(x):
    """Non-overlapping 2x2 mean over the last two axes."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even extents, got {(h, w)}")
    a = x.data
    out = (a[..., 0::2, 0::2] + a[..., 0::2, 1::2] + a[..., 1::2, 0::2] + a[..., 1::2, 1::2]) * 0.25

    def backward(g):
        gi = np.empty(a.shape)
        q = g * 0.25
        gi[..., 0::2, 0::2] = q
        gi[..., 0::2, 1::2] = q
        gi[..., 1::2, 0::2] = q
        gi[..., 1::2, 1::2] = q
        return (gi,)

    return _make(out, (x,), backward, "avg_pool2")


# ---------------------------------------------------------------- verification

def grad_check(f, x, eps=1e-6, indices=None):
    """Max relative error between backprop and central differences.

    ``f`` maps ``x`` (a Tensor, perturbed in place) to a scalar Tensor. Pass
    ``indices`` (flat positions) to check a subset of coordinates.
    """
    if not 1e-8 <= eps <= 1e-2:
        raise ContractError(f"eps {eps} outside the supported range")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        x.requires_grad = was
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.grad = None
    x.requires_grad = was

    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def xavier(rng, shape, gain=1.0):
    """Glorot-uniform init for conv/linear weights shaped [out, in, ...]."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
