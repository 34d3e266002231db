# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 2-D convolution kernels over batches of variable-size images.

Same contract as ``_pykernels``: sample ``n`` occupies the top-left
``extents[n]`` corner of its buffer, the rest is ignored on input and left
at zero on output.  Work outside the extents is skipped entirely, which is
where the speedup over the numpy path comes from on ragged batches.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange

NAME = "cython"

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _col_lo(Py_ssize_t v, Py_ssize_t pw, Py_ssize_t sw) noexcept nogil:
    # first output column whose tap v lands at input column >= 0
    if v >= pw:
        return 0
    return (pw - v + sw - 1) // sw


cdef inline Py_ssize_t _col_hi(Py_ssize_t v, Py_ssize_t pw, Py_ssize_t sw,
                               Py_ssize_t ew, Py_ssize_t ow) noexcept nogil:
    # one past the last output column whose tap v lands at input column < ew
    cdef Py_ssize_t num = ew - 1 - v + pw
    cdef Py_ssize_t hi
    if num < 0:
        return 0
    hi = num // sw + 1
    if hi > ow:
        hi = ow
    return hi


cdef inline void _axpy(real* y, const real* x, real a, Py_ssize_t lo, Py_ssize_t hi,
                       Py_ssize_t sx, Py_ssize_t off) noexcept nogil:
    cdef Py_ssize_t j
    if sx == 1:
        for j in range(lo, hi):
            y[j] += a * x[j + off]
    else:
        for j in range(lo, hi):
            y[j] += a * x[j * sx + off]


cdef inline void _scatter(real* y, const real* x, real a, Py_ssize_t lo, Py_ssize_t hi,
                          Py_ssize_t sy, Py_ssize_t off) noexcept nogil:
    cdef Py_ssize_t j
    if sy == 1:
        for j in range(lo, hi):
            y[j + off] += a * x[j]
    else:
        for j in range(lo, hi):
            y[j * sy + off] += a * x[j]


cdef inline double _dot(const real* g, const real* x, Py_ssize_t lo, Py_ssize_t hi,
                        Py_ssize_t sx, Py_ssize_t off) noexcept nogil:
    # one row (<= a few hundred terms) in the native type so the loop vectorises;
    # callers accumulate rows in double
    cdef Py_ssize_t j
    cdef real acc = 0
    if sx == 1:
        for j in range(lo, hi):
            acc += g[j] * x[j + off]
    else:
        for j in range(lo, hi):
            acc += g[j] * x[j * sx + off]
    return <double>acc


cdef void _forward_one(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] b,
                       real[:, :, :, ::1] out, Py_ssize_t n,
                       Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t sh, Py_ssize_t sw,
                       Py_ssize_t eh, Py_ssize_t ew, Py_ssize_t oh, Py_ssize_t ow) noexcept nogil:
    cdef Py_ssize_t O = w.shape[0], C = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t o, c, u, v, a, j, ia, lo, hi
    cdef real wv
    for o in range(O):
        for a in range(oh):
            for j in range(ow):
                out[n, o, a, j] = b[o]
        for c in range(C):
            for u in range(KH):
                for v in range(KW):
                    wv = w[o, c, u, v]
                    lo = _col_lo(v, pw, sw)
                    hi = _col_hi(v, pw, sw, ew, ow)
                    if hi <= lo:
                        continue
                    for a in range(oh):
                        ia = a * sh + u - ph
                        if ia < 0 or ia >= eh:
                            continue
                        _axpy(&out[n, o, a, 0], &x[n, c, ia, 0], wv, lo, hi, sw, v - pw)


cdef void _backward_input_one(real[:, :, :, ::1] gx, real[:, :, :, ::1] w,
                              real[:, :, :, ::1] gout, Py_ssize_t n,
                              Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t sh, Py_ssize_t sw,
                              Py_ssize_t eh, Py_ssize_t ew, Py_ssize_t oh, Py_ssize_t ow) noexcept nogil:
    cdef Py_ssize_t O = w.shape[0], C = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t o, c, u, v, a, ia, lo, hi
    cdef real wv
    for c in range(C):
        for o in range(O):
            for u in range(KH):
                for v in range(KW):
                    wv = w[o, c, u, v]
                    lo = _col_lo(v, pw, sw)
                    hi = _col_hi(v, pw, sw, ew, ow)
                    if hi <= lo:
                        continue
                    for a in range(oh):
                        ia = a * sh + u - ph
                        if ia < 0 or ia >= eh:
                            continue
                        _scatter(&gx[n, c, ia, 0], &gout[n, o, a, 0], wv, lo, hi, sw, v - pw)


cdef void _backward_weight_sample(real[:, :, :, ::1] x, real[:, :, :, ::1] gout,
                                  double[:, :, ::1] part, Py_ssize_t n,
                                  Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t sh, Py_ssize_t sw,
                                  Py_ssize_t eh, Py_ssize_t ew, Py_ssize_t oh, Py_ssize_t ow,
                                  Py_ssize_t KH, Py_ssize_t KW) noexcept nogil:
    # part[n, o, :] holds this sample's (c, u, v) weight gradient followed by its bias gradient
    cdef Py_ssize_t O = gout.shape[1], C = x.shape[1]
    cdef Py_ssize_t o, c, u, v, a, j, ia, lo, hi, col
    cdef double acc
    for o in range(O):
        acc = 0.0
        for a in range(oh):
            for j in range(ow):
                acc += gout[n, o, a, j]
        part[n, o, C * KH * KW] = acc
        for c in range(C):
            for u in range(KH):
                for v in range(KW):
                    col = (c * KH + u) * KW + v
                    lo = _col_lo(v, pw, sw)
                    hi = _col_hi(v, pw, sw, ew, ow)
                    acc = 0.0
                    if hi > lo:
                        for a in range(oh):
                            ia = a * sh + u - ph
                            if ia < 0 or ia >= eh:
                                continue
                            acc += _dot(&gout[n, o, a, 0], &x[n, c, ia, 0], lo, hi, sw, v - pw)
                    part[n, o, col] = acc


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] b,
                   Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t sh, Py_ssize_t sw,
                   cnp.int64_t[:, ::1] in_ext, cnp.int64_t[:, ::1] out_ext,
                   Py_ssize_t out_h, Py_ssize_t out_w, int nthreads=1):
    cdef Py_ssize_t N = x.shape[0], O = w.shape[0], n
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((N, O, out_h, out_w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    for n in prange(N, nogil=True, num_threads=nthreads, schedule="static"):
        _forward_one(x, w, b, out, n, ph, pw, sh, sw,
                     in_ext[n, 0], in_ext[n, 1], out_ext[n, 0], out_ext[n, 1])
    return out_arr


def conv2d_backward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[:, :, :, ::1] gout,
                    Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t sh, Py_ssize_t sw,
                    cnp.int64_t[:, ::1] in_ext, cnp.int64_t[:, ::1] out_ext,
                    bint need_input=True, int nthreads=1):
    cdef Py_ssize_t N = x.shape[0], O = w.shape[0], n, o
    dtype = np.float32 if real is float else np.float64
    gw_arr = np.zeros(np.asarray(w).shape, dtype=dtype)
    gb_arr = np.zeros(O, dtype=dtype)
    cdef real[:, :, :, ::1] gx
    gx_arr = None
    cdef Py_ssize_t KH = w.shape[2], KW = w.shape[3], C = w.shape[1]
    part_arr = np.empty((N, O, C * KH * KW + 1), dtype=np.float64)
    cdef double[:, :, ::1] part = part_arr
    for n in prange(N, nogil=True, num_threads=nthreads, schedule="static"):
        _backward_weight_sample(x, gout, part, n, ph, pw, sh, sw,
                                in_ext[n, 0], in_ext[n, 1], out_ext[n, 0], out_ext[n, 1], KH, KW)
    # fixed-order reduction over samples: independent of the thread count
    total = part_arr.sum(axis=0)
    gw_arr[...] = total[:, :-1].reshape(gw_arr.shape)
    gb_arr[...] = total[:, -1]
    if need_input:
        gx_arr = np.zeros(np.asarray(x).shape, dtype=dtype)
        gx = gx_arr
        for n in prange(N, nogil=True, num_threads=nthreads, schedule="static"):
            _backward_input_one(gx, w, gout, n, ph, pw, sh, sw,
                                in_ext[n, 0], in_ext[n, 1], out_ext[n, 0], out_ext[n, 1])
    return gx_arr, gw_arr, gb_arr
