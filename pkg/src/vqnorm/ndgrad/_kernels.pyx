# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for 3D convolution on channels-last grids.

Same contracts as ``_kernels_py``. Inputs are (N, D, H, W, C); the patch
axis is ordered (kd, kh, kw, channel), so for a fixed (kd, kh) the kw*C
values of a patch row are one contiguous run of the input.
"""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy, memset

ctypedef fused real:
    float
    double


def out_extent(int n, int k, int stride, int pad):
    return (n + 2 * pad - k) // stride + 1


cdef void _im2col(const real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] cols,
                  int k, int stride, int pad) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t c = x.shape[4]
    cdef Py_ssize_t od = cols.shape[1], oh = cols.shape[2], ow = cols.shape[3]
    cdef Py_ssize_t b, i, j, l, a, bb, zi, yi, x0, e_lo, e_hi, off
    cdef real* dst
    for b in range(n):
        for i in range(od):
            for j in range(oh):
                for l in range(ow):
                    dst = &cols[b, i, j, l, 0]
                    x0 = l * stride - pad
                    e_lo = -x0 if x0 < 0 else 0
                    e_hi = w - x0 if x0 + k > w else k
                    for a in range(k):
                        zi = i * stride + a - pad
                        for bb in range(k):
                            yi = j * stride + bb - pad
                            off = (a * k + bb) * k * c
                            if zi < 0 or zi >= d or yi < 0 or yi >= h or e_hi <= e_lo:
                                memset(dst + off, 0, k * c * sizeof(real))
                                continue
                            if e_lo > 0:
                                memset(dst + off, 0, e_lo * c * sizeof(real))
                            memcpy(dst + off + e_lo * c, &x[b, zi, yi, x0 + e_lo, 0],
                                   (e_hi - e_lo) * c * sizeof(real))
                            if e_hi < k:
                                memset(dst + off + e_hi * c, 0, (k - e_hi) * c * sizeof(real))


cdef void _col2im(const real[:, :, :, :, ::1] cols, real[:, :, :, :, ::1] out,
                  int k, int stride, int pad) noexcept nogil:
    cdef Py_ssize_t n = out.shape[0], d = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t c = out.shape[4]
    cdef Py_ssize_t od = cols.shape[1], oh = cols.shape[2], ow = cols.shape[3]
    cdef Py_ssize_t b, i, j, l, a, bb, zi, yi, x0, e_lo, e_hi, off, t, run
    cdef const real* src
    cdef real* dst
    for b in range(n):
        for i in range(od):
            for j in range(oh):
                for l in range(ow):
                    src = &cols[b, i, j, l, 0]
                    x0 = l * stride - pad
                    e_lo = -x0 if x0 < 0 else 0
                    e_hi = w - x0 if x0 + k > w else k
                    if e_hi <= e_lo:
                        continue
                    run = (e_hi - e_lo) * c
                    for a in range(k):
                        zi = i * stride + a - pad
                        if zi < 0 or zi >= d:
                            continue
                        for bb in range(k):
                            yi = j * stride + bb - pad
                            if yi < 0 or yi >= h:
                                continue
                            off = ((a * k + bb) * k + e_lo) * c
                            dst = &out[b, zi, yi, x0 + e_lo, 0]
                            for t in range(run):
                                dst[t] += src[off + t]


def im2col3d(x, int k, int stride, int pad):
    x = np.ascontiguousarray(x)
    n, d, h, w, c = x.shape
    od, oh, ow = [(s + 2 * pad - k) // stride + 1 for s in (d, h, w)]
    cols = np.empty((n, od, oh, ow, k * k * k * c), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, k, stride, pad)
    elif x.dtype == np.float64:
        _im2col[double](x, cols, k, stride, pad)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def col2im3d(cols, tuple x_shape, int k, int stride, int pad):
    n, d, h, w, c = x_shape
    od, oh, ow = [(s + 2 * pad - k) // stride + 1 for s in (d, h, w)]
    cols = np.ascontiguousarray(cols).reshape(n, od, oh, ow, k * k * k * c)
    out = np.zeros((n, d, h, w, c), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, out, k, stride, pad)
    elif cols.dtype == np.float64:
        _col2im[double](cols, out, k, stride, pad)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out
