"""Pure-numpy reference kernels.

Each sample ``n`` of a batch is an image of size ``extents[n]`` stored in the
top-left corner of a zero-filled buffer.  Values outside the extent are
ignored, and outputs outside the per-sample output extent are exactly zero.
"""
import numpy as np

NAME = "python"


def _extent_mask(extents, h, w, dtype):
    rows = np.arange(h)[None, :, None] < extents[:, 0, None, None]
    cols = np.arange(w)[None, None, :] < extents[:, 1, None, None]
    return (rows & cols).astype(dtype)[:, None]


def conv2d_forward(x, w, b, ph, pw, sh, sw, in_ext, out_ext, out_h, out_w, nthreads=1):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    x = x * _extent_mask(in_ext, h, wd, x.dtype)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    acc = np.zeros((o, n, out_h, out_w), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u:u + sh * (out_h - 1) + 1:sh, v:v + sw * (out_w - 1) + 1:sw]
            acc += np.tensordot(w[:, :, u, v], patch, axes=([1], [1]))
    out = acc.transpose(1, 0, 2, 3) + b[None, :, None, None]
    out *= _extent_mask(out_ext, out_h, out_w, x.dtype)
    return np.ascontiguousarray(out)


def conv2d_backward(x, w, gout, ph, pw, sh, sw, in_ext, out_ext, need_input=True, nthreads=1):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    out_h, out_w = gout.shape[2:]
    x = x * _extent_mask(in_ext, h, wd, x.dtype)
    gout = gout * _extent_mask(out_ext, out_h, out_w, gout.dtype)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp) if need_input else None
    for u in range(kh):
        for v in range(kw):
            rs = slice(u, u + sh * (out_h - 1) + 1, sh)
            cs = slice(v, v + sw * (out_w - 1) + 1, sw)
            gw[:, :, u, v] = np.tensordot(gout, xp[:, :, rs, cs], axes=([0, 2, 3], [0, 2, 3]))
            if need_input:
                contrib = np.tensordot(gout, w[:, :, u, v], axes=([1], [0]))
                gxp[:, :, rs, cs] += contrib.transpose(0, 3, 1, 2)
    gb = gout.sum(axis=(0, 2, 3))
    gx = None
    if need_input:
        gx = gxp[:, :, ph:ph + h, pw:pw + wd] * _extent_mask(in_ext, h, wd, x.dtype)
        gx = np.ascontiguousarray(gx)
    return gx, gw, gb
