"""Differentiable operations beyond the arithmetic defined on :class:`Tensor`."""
import math

import numpy as np

from ..errors import ArgumentError, DimensionError
from . import kernels
from .tensor import Tensor, as_tensor, unbroadcast

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(a.data @ b.data, (a, b), backward)


def einsum(subscripts, a, b):
    """Two-operand einsum with explicit output, e.g. ``"nsd,krd->nksr"``.

    Every index of an operand must appear in the other operand or the
    output, which is what makes the gradient another einsum.
    """
    a, b = as_tensor(a), as_tensor(b)
    lhs, out = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        stray = set(own) - set(other) - set(out)
        if stray:
            raise ArgumentError(f"index {''.join(sorted(stray))} summed within one operand is not supported")

    def backward(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return Tensor._node(np.einsum(subscripts, a.data, b.data, optimize=True), (a, b), backward)


def gelu(x, epsilon=0.5, rho=0.044715):
    """eps * x * (1 + tanh(sqrt(2/pi) * (x + rho x^3)))."""
    x = as_tensor(x)
    v = x.data
    inner = SQRT_2_OVER_PI * (v + rho * (v * v * v))  # v ** 3 hits a slow generic pow
    t = np.tanh(inner)
    out = epsilon * v * (1.0 + t)

    def backward(g):
        d = epsilon * (1.0 + t) + epsilon * v * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * rho * v * v)
        return (g * d,)

    return Tensor._node(out, (x,), backward)


def softmax(x, axis=-1, bias=None):
    """Max-stabilised softmax; ``bias`` is an additive constant (e.g. a key mask)."""
    x = as_tensor(x)
    z = x.data if bias is None else x.data + bias
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._node(y, (x,), backward)


def softmax_rows(x):
    return softmax(x, axis=-1)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._node(out, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean / unit variance, then ``* gain + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm width {x.shape[-1]} vs gain {gain.shape} / bias {bias.shape}")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    lead = tuple(range(v.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            dy = g * gain.data
            gx = rstd * (dy - dy.mean(axis=-1, keepdims=True)
                         - xhat * (dy * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return Tensor._node(out, (x, gain, bias), backward)


def _pair(v):
    if isinstance(v, int):
        return (v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 2:
        raise ArgumentError(f"expected an int or a pair, got {v}")
    return v


def conv2d(x, kernels_, bias=None, padding=0, stride=1, extents=None):
    """2-D cross-correlation.

    ``x`` is ``(c_in, h, w)`` or batched ``(n, c_in, h, w)``; ``kernels_`` is
    ``(c_out, c_in, kh, kw)``.  With ``extents`` (an ``(n, 2)`` int array)
    each sample is treated as an image of that size in the top-left corner of
    its buffer and zero-padded at its own border; output cells outside the
    per-sample output extent are zero.
    """
    x, w = as_tensor(x), as_tensor(kernels_)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got shape {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d kernels must be 4-D, got shape {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d axis 'channels': input has {x.shape[1]}, kernels expect {w.shape[1]}")
    ph, pw = _pair(padding)
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ArgumentError("conv2d stride must be >= 1 and padding >= 0")
    if x.shape[2] + 2 * ph < w.shape[2]:
        raise DimensionError(f"conv2d axis 'height': padded input {x.shape[2] + 2 * ph} < kernel {w.shape[2]}")
    if x.shape[3] + 2 * pw < w.shape[3]:
        raise DimensionError(f"conv2d axis 'width': padded input {x.shape[3] + 2 * pw} < kernel {w.shape[3]}")
    if bias is None:
        b = Tensor(np.zeros(w.shape[0], dtype=x.dtype))
    else:
        b = as_tensor(bias)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv2d axis 'out_channels': bias {b.shape} vs {w.shape[0]} kernels")
    if extents is not None:
        extents = np.asarray(extents, dtype=np.int64).reshape(x.shape[0], 2)

    out, _ = kernels.conv2d_forward(x.data, w.data, b.data, (ph, pw), (sh, sw), extents)

    def backward(g):
        gx, gw, gb = kernels.conv2d_backward(x.data, w.data, g, (ph, pw), (sh, sw), extents,
                                             need_input=x.requires_grad)
        return gx, gw, gb

    res = Tensor._node(out, (x, w, b), backward)
    return res.reshape(res.shape[1:]) if squeeze else res


def extent_mask(extents, h, w, dtype=np.float64):
    """``(n, 1, h, w)`` indicator of the per-sample valid region."""
    extents = np.asarray(extents)
    rows = np.arange(h)[None, :, None] < extents[:, 0, None, None]
    cols = np.arange(w)[None, None, :] < extents[:, 1, None, None]
    return (rows & cols).astype(dtype)[:, None]


def spatial_mean(x, extents=None):
    """Global average pool ``(n, c, h, w) -> (n, c)`` over each sample's extent."""
    x = as_tensor(x)
    n, _, h, w = x.shape
    if extents is None:
        return x.mean(axis=(2, 3))
    extents = np.asarray(extents, dtype=np.int64).reshape(n, 2)
    count = extents[:, 0] * extents[:, 1]
    if np.any(count <= 0):
        raise DimensionError("spatial_mean over an empty extent")
    mask = extent_mask(extents, h, w, x.dtype)
    scale = (1.0 / count).astype(x.dtype)[:, None]
    out = (x.data * mask).sum(axis=(2, 3)) * scale

    def backward(g):
        return ((g * scale)[:, :, None, None] * mask,)

    return Tensor._node(out, (x,), backward)


def _tap_windows(extents, size, k, pad, axis):
    """``(n, k, size)`` indicator: input index feeds some output through tap ``t`` along one axis."""
    ext = extents[:, axis][:, None, None]
    out_ext = ext + 2 * pad - k + 1
    idx = np.arange(size)[None, None, :]
    tap = np.arange(k)[None, :, None]
    src = idx - tap + pad  # output position reading this input through the tap
    return (idx < ext) & (src >= 0) & (src < out_ext)


def conv2d_mean(x, kernels_, bias=None, padding=0, extents=None):
    """``spatial_mean(conv2d(x, kernels_, bias, padding, extents=extents), out_extents)``, stride 1.

    Averaging is linear, so the mean of each output channel is the kernel
    contracted with per-tap window sums of the input.  Nothing of output
    size is materialised.
    """
    x, w = as_tensor(x), as_tensor(kernels_)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d_mean needs 4-D input and kernels, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d axis 'channels': input has {x.shape[1]}, kernels expect {w.shape[1]}")
    n, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    ph, pw = _pair(padding)
    extents = (np.tile([h, wd], (n, 1)) if extents is None
               else np.asarray(extents, dtype=np.int64).reshape(n, 2))
    out_ext = extents + np.array([2 * ph - kh + 1, 2 * pw - kw + 1])
    if np.any(out_ext < 1):
        raise DimensionError("conv2d_mean: kernel does not fit a padded sample extent")
    b = Tensor(np.zeros(w.shape[0], dtype=x.dtype)) if bias is None else as_tensor(bias)
    rows = _tap_windows(extents, h, kh, ph, 0).astype(x.dtype)[:, None]    # (n, 1, kh, h)
    cols = _tap_windows(extents, wd, kw, pw, 1).astype(x.dtype)[:, None]   # (n, 1, kw, w)
    sums = rows @ x.data @ cols.swapaxes(-1, -2)                            # (n, c, kh, kw)
    scale = (1.0 / out_ext.prod(axis=1)).astype(x.dtype)[:, None]
    wf = w.data.reshape(w.shape[0], -1)
    flat = sums.reshape(n, -1)
    out = (flat @ wf.T) * scale + b.data

    def backward(g):
        gs = g * scale
        gx = None
        if x.requires_grad:
            gsum = (gs @ wf).reshape(sums.shape)
            gx = rows.swapaxes(-1, -2) @ gsum @ cols
        gw = (gs.T @ flat).reshape(w.shape) if w.requires_grad else None
        return gx, gw, g.sum(axis=0)

    return Tensor._node(out, (x, w, b), backward)


def soft_threshold(x, lam):
    """Elementwise shrinkage: x-lam above lam, x+lam below -lam, 0 in between.

    ``lam`` may be a float or a scalar tensor (then it receives a gradient).
    The subgradient at the kinks is taken as 0.
    """
    x = as_tensor(x)
    lam_t = lam if isinstance(lam, Tensor) else Tensor(np.asarray(lam, dtype=x.dtype))
    lv = lam_t.data
    if np.any(lv < 0):
        raise ArgumentError(f"soft threshold needs lambda >= 0, got {lv}")
    v = x.data
    above = v > lv
    below = v < -lv
    out = np.where(above, v - lv, np.where(below, v + lv, 0.0)).astype(v.dtype, copy=False)

    def backward(g):
        gx = g * (above | below) if x.requires_grad else None
        glam = None
        if lam_t.requires_grad:
            glam = unbroadcast(g * (below.astype(v.dtype) - above.astype(v.dtype)), lam_t.shape)
        return gx, glam

    return Tensor._node(out, (x, lam_t), backward)


def softplus(x):
    x = as_tensor(x)
    v = x.data
    out = np.logaddexp(0.0, v).astype(v.dtype, copy=False)

    def backward(g):
        return (g / (1.0 + np.exp(-v)),)

    return Tensor._node(out, (x,), backward)


def dropout(x, rate, rng, training=True):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor._node(out, tuple(tensors), backward)


def masked_max(x, mask, axis):
    """Max over ``axis`` ignoring entries where ``mask`` is False."""
    x = as_tensor(x)
    fill = np.where(mask, 0.0, -np.inf).astype(x.dtype)
    return (x + Tensor(fill)).max(axis=axis)


def l2_normalize(x, axis=-1):
    """x / ||x|| along ``axis``; all-zero slices map to zero (gradient passes through)."""
    x = as_tensor(x)
    v = x.data
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    zero = norm == 0
    safe = np.where(zero, 1.0, norm).astype(v.dtype)
    y = v / safe

    def backward(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * proj) / safe,)

    return Tensor._node(y, (x,), backward)
