"""Kernel backend selection.

The compiled backend (``_ckernels``) is used when it was built; otherwise,
or when ``RMARN_KERNELS=python`` is set, the numpy backend is used.
``RMARN_THREADS`` caps the number of OpenMP threads of the compiled kernels.
"""
import logging
import os

import numpy as np

from . import _pykernels

log = logging.getLogger(__name__)

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def _initial_backend():
    requested = os.environ.get("RMARN_KERNELS", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            log.warning("kernel backend %r unavailable, using numpy", requested)
            return _pykernels
        return _BACKENDS[requested]
    return _ckernels if _ckernels is not None else _pykernels


_impl = _initial_backend()


def available_backends():
    return sorted(_BACKENDS)


def backend():
    return _impl.NAME


def set_backend(name):
    """Switch backend at runtime; returns the previous backend name."""
    global _impl
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; have {available_backends()}")
    prev = _impl.NAME
    _impl = _BACKENDS[name]
    return prev


def thread_count():
    raw = os.environ.get("RMARN_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            log.warning("ignoring non-integer RMARN_THREADS=%r", raw)
    return os.cpu_count() or 1


def output_extents(in_ext, kh, kw, ph, pw, sh, sw, out_h, out_w):
    oh = (in_ext[:, 0] + 2 * ph - kh) // sh + 1
    ow = (in_ext[:, 1] + 2 * pw - kw) // sw + 1
    oh = np.clip(np.where(in_ext[:, 0] + 2 * ph - kh < 0, 0, oh), 0, out_h)
    ow = np.clip(np.where(in_ext[:, 1] + 2 * pw - kw < 0, 0, ow), 0, out_w)
    return np.ascontiguousarray(np.stack([oh, ow], axis=1), dtype=np.int64)


def _prep(x, w, b, extents):
    dtype = x.dtype
    x = np.ascontiguousarray(x, dtype=dtype)
    w = np.ascontiguousarray(w, dtype=dtype)
    if extents is None:
        extents = np.tile(np.array(x.shape[2:], dtype=np.int64), (x.shape[0], 1))
    extents = np.ascontiguousarray(np.minimum(extents, x.shape[2:]), dtype=np.int64)
    if b is not None:
        b = np.ascontiguousarray(b, dtype=dtype)
    return x, w, b, extents


def conv2d_forward(x, w, b, padding, stride, extents=None):
    """Batched cross-correlation; returns ``(out, out_extents)``."""
    x, w, b, in_ext = _prep(x, w, b, extents)
    (ph, pw), (sh, sw) = padding, stride
    kh, kw = w.shape[2:]
    out_h = (x.shape[2] + 2 * ph - kh) // sh + 1
    out_w = (x.shape[3] + 2 * pw - kw) // sw + 1
    out_ext = output_extents(in_ext, kh, kw, ph, pw, sh, sw, out_h, out_w)
    out = _impl.conv2d_forward(x, w, b, ph, pw, sh, sw, in_ext, out_ext, out_h, out_w, thread_count())
    return out, out_ext


def conv2d_backward(x, w, gout, padding, stride, extents=None, need_input=True):
    """Gradients ``(gx, gw, gb)`` of a conv2d_forward call."""
    x, w, _, in_ext = _prep(x, w, None, extents)
    gout = np.ascontiguousarray(gout, dtype=x.dtype)
    (ph, pw), (sh, sw) = padding, stride
    kh, kw = w.shape[2:]
    out_ext = output_extents(in_ext, kh, kw, ph, pw, sh, sw, gout.shape[2], gout.shape[3])
    return _impl.conv2d_backward(x, w, gout, ph, pw, sh, sw, in_ext, out_ext,
                                 need_input, thread_count())
