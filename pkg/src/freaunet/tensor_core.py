"""Dense float64 tensors with reverse-mode automatic differentiation.

Single-machine engine for the network in this package: a Tensor value type,
the differentiable operations the encoder/decoder architecture needs, and a
bias-corrected ADAM update. Image data uses NCHW layout. Everything runs in
64-bit floats so gradient checks are meaningful.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor", "GradTape", "AdamState", "no_grad", "backward", "zero_grads",
    "add", "sub", "mul", "div", "neg", "scale", "tanh", "relu", "abs_",
    "mean_all", "sum_all", "sum_channels", "spatial_softmax",
    "concat_channels", "avg_pool2d", "upsample_bilinear",
    "conv2d", "conv_transpose2d", "batch_norm", "dropout", "adam_step",
]

_seq = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (inference only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float64 array with an optional gradient record.

    ``data`` is always a contiguous float64 buffer. Tensors produced by the
    operations in this module remember their parents and how to push an
    adjoint back to them; ``backward`` replays those records in reverse
    execution order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_seq")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None
        self._seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() requires a scalar tensor, got shape {self.data.shape}")

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, grad_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g, shape):
    """Sum an adjoint down to the shape of the operand it belongs to."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class GradTape:
    """Ordered record of the operations behind one output tensor.

    Collects every graph node reachable from the output and keeps them in
    ascending execution order; the backward sweep walks that list in exact
    reverse. Adjoints are accumulated per node in a scratch table so repeated
    backward calls add (never double-propagate) gradients.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, output):
        seen = set()
        nodes = []
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def run(self, output, seed):
        adjoint = {id(output): seed}
        for t in reversed(self.nodes):
            g = adjoint.pop(id(t), None)
            if g is None:
                continue
            t.grad = g if t.grad is None else t.grad + g
            if t._grad_fn is None:
                continue
            for parent, pg in zip(t._parents, t._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in adjoint:
                    adjoint[pid] = adjoint[pid] + pg
                else:
                    adjoint[pid] = pg


def backward(loss):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar. Gradients accumulate by summation across uses
    and across repeated calls; callers zero grads between optimizer steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    GradTape.trace(loss).run(loss, np.ones_like(loss.data))


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _result(a.data - b.data, (a, b), grad_fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _result(a.data * b.data, (a, b), grad_fn)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(a.data / b.data, (a, b), grad_fn)


def neg(x):
    def grad_fn(g):
        return (-g,)

    return _result(-x.data, (x,), grad_fn)


def scale(x, c):
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return _result(x.data * c, (x,), grad_fn)


def tanh(x):
    y = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - y * y),)

    return _result(y, (x,), grad_fn)


def relu(x):
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), grad_fn)


def abs_(x):
    sign = np.sign(x.data)  # subgradient 0 at x == 0

    def grad_fn(g):
        return (g * sign,)

    return _result(np.abs(x.data), (x,), grad_fn)


def mean_all(x):
    n = x.data.size

    def grad_fn(g):
        return (np.full(x.data.shape, float(g) / n),)

    return _result(x.data.mean(), (x,), grad_fn)


def sum_all(x):
    def grad_fn(g):
        return (np.full(x.data.shape, float(g)),)

    return _result(x.data.sum(), (x,), grad_fn)


def sum_channels(x):
    """Sum an NCHW tensor over its channel axis, keeping the axis."""
    def grad_fn(g):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _result(x.data.sum(axis=1, keepdims=True), (x,), grad_fn)


def spatial_softmax(x):
    """Softmax over the joint H*W positions of each (N, C) plane."""
    z = x.data - x.data.max(axis=(2, 3), keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=(2, 3), keepdims=True)

    def grad_fn(g):
        dot = (g * s).sum(axis=(2, 3), keepdims=True)
        return (s * (g - dot),)

    return _result(s, (x,), grad_fn)


def concat_channels(a, b):
    """Concatenate two NCHW tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects NCHW tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(
            f"concat_channels spatial/batch mismatch: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]

    def grad_fn(g):
        return g[:, :ca], g[:, ca:]

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), grad_fn)


def avg_pool2d(x, factor):
    """Average pooling with equal integer kernel and stride."""
    factor = int(factor)
    n, c, h, w = x.data.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"pool factor {factor} does not divide spatial dims {(h, w)}")
    oh, ow = h // factor, w // factor
    y = x.data.reshape(n, c, oh, factor, ow, factor).mean(axis=(3, 5))

    def grad_fn(g):
        gx = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (gx / (factor * factor),)

    return _result(y, (x,), grad_fn)


def _interp_axis(in_size, out_size):
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    return i0, i1, src - i0


def upsample_bilinear(x, out_h, out_w):
    """Bilinear resampling with half-pixel centers (align_corners=false)."""
    n, c, h, w = x.data.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    y0, y1, fy = _interp_axis(h, out_h)
    x0, x1, fx = _interp_axis(w, out_w)
    wy = fy[:, None]
    wx = fx[None, :]
    d = x.data
    out = ((1 - wy) * (1 - wx) * d[:, :, y0][:, :, :, x0]
           + (1 - wy) * wx * d[:, :, y0][:, :, :, x1]
           + wy * (1 - wx) * d[:, :, y1][:, :, :, x0]
           + wy * wx * d[:, :, y1][:, :, :, x1])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        full = (slice(None), slice(None))
        np.add.at(gx, full + (y0[:, None], x0[None, :]), g * ((1 - wy) * (1 - wx)))
        np.add.at(gx, full + (y0[:, None], x1[None, :]), g * ((1 - wy) * wx))
        np.add.at(gx, full + (y1[:, None], x0[None, :]), g * (wy * (1 - wx)))
        np.add.at(gx, full + (y1[:, None], x1[None, :]), g * (wy * wx))
        return (gx,)

    return _result(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _windows(xp, k, stride, out_h, out_w):
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, k, k, out_h, out_w),
        (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)


def _scatter_windows(buf, dcols, k, stride, out_h, out_w):
    # dcols: (N, out_h, out_w, C, K, K); buf: padded (N, C, H, W) accumulator
    for i in range(k):
        for j in range(k):
            buf[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)


def conv2d(x, weight, bias, stride=1, padding=0):
    """2D cross-correlation of an NCHW input with an OIKK kernel.

    Output spatial size is floor((H + 2*padding - K) / stride) + 1 per axis.
    Differentiable with respect to input, weight and bias.
    """
    stride, padding = int(stride), int(padding)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIKK weight")
    n, c, h, w = x.data.shape
    o, i, kh, kw = weight.data.shape
    if kh != kw:
        raise ValueError(f"square kernels only, got {kh}x{kw}")
    if c != i:
        raise ValueError(f"input has {c} channels but weight expects {i}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"kernel {kh}x{kw} does not fit padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.data.shape != (o,):
        raise ValueError(f"bias shape {bias.data.shape} does not match {o} output channels")

    k = kh
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _windows(xp, k, stride, oh, ow)
    out = np.tensordot(weight.data, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grad_fn(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        dcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (N, oh, ow, C, K, K)
        gxp = np.zeros_like(xp)
        _scatter_windows(gxp, dcols, k, stride, oh, ow)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, grad_fn)


def conv_transpose2d(x, weight, bias, stride=1, padding=0):
    """Transposed 2D convolution; the exact adjoint of conv2d in the input.

    Weight layout is (C_in, C_out, K, K). Output spatial size is
    (H - 1) * stride - 2 * padding + K per axis, so for a given weight
    <conv2d(a, w), b> == <a, conv_transpose2d(b, w)> holds to rounding.
    """
    stride, padding = int(stride), int(padding)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv_transpose2d expects NCHW input and IOKK weight")
    n, c, h, w = x.data.shape
    ci, co, kh, kw = weight.data.shape
    if kh != kw:
        raise ValueError(f"square kernels only, got {kh}x{kw}")
    if c != ci:
        raise ValueError(f"input has {c} channels but weight expects {ci}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    k = kh
    oh = (h - 1) * stride - 2 * padding + k
    ow = (w - 1) * stride - 2 * padding + k
    if oh < 1 or ow < 1:
        raise ValueError(f"degenerate output size {oh}x{ow}")
    if bias is not None and bias.data.shape != (co,):
        raise ValueError(f"bias shape {bias.data.shape} does not match {co} output channels")

    dcols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # (N, h, w, C_out, K, K)
    buf = np.zeros((n, co, oh + 2 * padding, ow + 2 * padding))
    _scatter_windows(buf, dcols, k, stride, h, w)
    out = buf[:, :, padding:padding + oh, padding:padding + ow]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grad_fn(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
            if padding else g
        cols_g = _windows(gp, k, stride, h, w)
        gx = np.tensordot(weight.data, cols_g, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
        gw = np.tensordot(x.data, cols_g, axes=([0, 2, 3], [0, 4, 5]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, grad_fn)


# ---------------------------------------------------------------------------
# normalization and regularization
# ---------------------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, mode="train",
               momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over the N, H, W axes.

    Train mode normalizes with batch statistics and updates the running
    buffers in place; eval mode normalizes with the running buffers. With
    batch size 1 this degenerates to per-channel spatial normalization.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    if n * h * w == 0:
        raise ValueError("batch_norm requires nonzero spatial extent")

    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean[:] = (1.0 - momentum) * running_mean + momentum * mu
        running_var[:] = (1.0 - momentum) * running_var + momentum * var
    else:
        mu = running_mean.copy()
        var = running_var.copy()

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    train = mode == "train"

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if train:
            m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = inv[None, :, None, None] * (dxhat - m1 - xhat * m2)
        else:
            gx = dxhat * inv[None, :, None, None]
        return gx, dgamma, dbeta

    return _result(out, (x, gamma, beta), grad_fn)


def dropout(x, p, mode="train", rng=None):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Eval mode and p == 0 are exact identities. ``rng`` is an integer seed or
    a numpy Generator; a fixed seed gives a reproducible mask.
    """
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    keep = (gen.random(x.data.shape) >= p) / (1.0 - p)

    def grad_fn(g):
        return (g * keep,)

    return _result(x.data * keep, (x,), grad_fn)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus hyperparameters."""

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                   m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state):
    """One bias-corrected ADAM update; parameters are modified in place.

    ``grads`` aligns with ``params``; a None entry leaves that parameter (and
    its moments) untouched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state buffers must align")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} does not match param {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
