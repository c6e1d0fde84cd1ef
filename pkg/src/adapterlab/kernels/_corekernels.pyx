# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled 3x3 convolution kernels: the inner loop of every training step.

Each (c_out, c_in) pair is a fully unrolled 9-tap stencil over a padded input
copy, so the per-row inner loops are branch-free and vectorizable.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef void _pad_copy(const double[:, :, ::1] src, double[:, :, ::1] dst) noexcept nogil:
    cdef Py_ssize_t c = src.shape[0], h = src.shape[1], w = src.shape[2]
    cdef Py_ssize_t ci, y, xx
    for ci in range(c):
        for y in range(h):
            for xx in range(w):
                dst[ci, y + 1, xx + 1] = src[ci, y, xx]


def conv3x3_forward(double[:, :, ::1] x, double[:, :, :, ::1] w, double[::1] b):
    """Convolve x (C_in,H,W) with w (C_out,C_in,3,3) + b (C_out,); padding 1, stride 1."""
    cdef Py_ssize_t c_in = x.shape[0], h = x.shape[1], wid = x.shape[2]
    cdef Py_ssize_t c_out = w.shape[0]
    out_arr = np.empty((c_out, h, wid), dtype=np.float64)
    pad_arr = np.zeros((c_in, h + 2, wid + 2), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] pad = pad_arr
    cdef Py_ssize_t co, ci, y, xx
    cdef double w00, w01, w02, w10, w11, w12, w20, w21, w22, bias
    cdef const double* r0
    cdef const double* r1
    cdef const double* r2
    cdef double* o

    with nogil:
        _pad_copy(x, pad)
        for co in range(c_out):
            bias = b[co]
            for y in range(h):
                o = &out[co, y, 0]
                for xx in range(wid):
                    o[xx] = bias
            for ci in range(c_in):
                w00 = w[co, ci, 0, 0]; w01 = w[co, ci, 0, 1]; w02 = w[co, ci, 0, 2]
                w10 = w[co, ci, 1, 0]; w11 = w[co, ci, 1, 1]; w12 = w[co, ci, 1, 2]
                w20 = w[co, ci, 2, 0]; w21 = w[co, ci, 2, 1]; w22 = w[co, ci, 2, 2]
                for y in range(h):
                    r0 = &pad[ci, y, 0]
                    r1 = &pad[ci, y + 1, 0]
                    r2 = &pad[ci, y + 2, 0]
                    o = &out[co, y, 0]
                    for xx in range(wid):
                        o[xx] += (
                            w00 * r0[xx] + w01 * r0[xx + 1] + w02 * r0[xx + 2]
                            + w10 * r1[xx] + w11 * r1[xx + 1] + w12 * r1[xx + 2]
                            + w20 * r2[xx] + w21 * r2[xx + 1] + w22 * r2[xx + 2]
                        )
    return out_arr


cdef inline double _dot4(const double* a, const double* b, Py_ssize_t n) noexcept nogil:
    # four explicit accumulator lanes: reassociated in source so the compiler
    # may vectorize the reduction without breaking IEEE semantics
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t t = 0
    while t + 4 <= n:
        s0 += a[t] * b[t]
        s1 += a[t + 1] * b[t + 1]
        s2 += a[t + 2] * b[t + 2]
        s3 += a[t + 3] * b[t + 3]
        t += 4
    while t < n:
        s0 += a[t] * b[t]
        t += 1
    return (s0 + s1) + (s2 + s3)


def conv3x3_backward(double[:, :, ::1] x, double[:, :, :, ::1] w, double[:, :, ::1] g):
    """Gradients of conv3x3_forward given upstream g (C_out,H,W); returns (gx, gw, gb).

    gx is the 3x3 correlation of g with the flipped kernel (again a padded
    stencil); gw taps reduce over shifted (g, x) row products.
    """
    cdef Py_ssize_t c_in = x.shape[0], h = x.shape[1], wid = x.shape[2]
    cdef Py_ssize_t c_out = w.shape[0]
    gx_arr = np.zeros((c_in, h, wid), dtype=np.float64)
    gw_arr = np.zeros((c_out, c_in, 3, 3), dtype=np.float64)
    gb_arr = np.zeros(c_out, dtype=np.float64)
    padg_arr = np.zeros((c_out, h + 2, wid + 2), dtype=np.float64)
    padx_arr = np.zeros((c_in, h + 2, wid + 2), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double[:, :, ::1] padg = padg_arr
    cdef double[:, :, ::1] padx = padx_arr
    cdef Py_ssize_t co, ci, y, xx
    cdef double w00, w01, w02, w10, w11, w12, w20, w21, w22, s
    cdef double a00, a01, a02, a10, a11, a12, a20, a21, a22, gv
    cdef const double* r0
    cdef const double* r1
    cdef const double* r2
    cdef const double* grow
    cdef double* o

    with nogil:
        _pad_copy(g, padg)
        _pad_copy(x, padx)
        for co in range(c_out):
            s = 0.0
            for y in range(h):
                grow = &g[co, y, 0]
                for xx in range(wid):
                    s += grow[xx]
            gb[co] = s
            for ci in range(c_in):
                # gx: stencil of padded g with the spatially flipped kernel
                w00 = w[co, ci, 2, 2]; w01 = w[co, ci, 2, 1]; w02 = w[co, ci, 2, 0]
                w10 = w[co, ci, 1, 2]; w11 = w[co, ci, 1, 1]; w12 = w[co, ci, 1, 0]
                w20 = w[co, ci, 0, 2]; w21 = w[co, ci, 0, 1]; w22 = w[co, ci, 0, 0]
                a00 = a01 = a02 = a10 = a11 = a12 = a20 = a21 = a22 = 0.0
                for y in range(h):
                    r0 = &padg[co, y, 0]
                    r1 = &padg[co, y + 1, 0]
                    r2 = &padg[co, y + 2, 0]
                    o = &gx[ci, y, 0]
                    for xx in range(wid):
                        o[xx] += (
                            w00 * r0[xx] + w01 * r0[xx + 1] + w02 * r0[xx + 2]
                            + w10 * r1[xx] + w11 * r1[xx + 1] + w12 * r1[xx + 2]
                            + w20 * r2[xx] + w21 * r2[xx + 1] + w22 * r2[xx + 2]
                        )
                    # gw[i, j] = sum_y,x g[y, x] * padded_x[y + i, x + j]
                    grow = &g[co, y, 0]
                    r0 = &padx[ci, y, 0]
                    r1 = &padx[ci, y + 1, 0]
                    r2 = &padx[ci, y + 2, 0]
                    a00 += _dot4(grow, r0, wid); a01 += _dot4(grow, r0 + 1, wid); a02 += _dot4(grow, r0 + 2, wid)
                    a10 += _dot4(grow, r1, wid); a11 += _dot4(grow, r1 + 1, wid); a12 += _dot4(grow, r1 + 2, wid)
                    a20 += _dot4(grow, r2, wid); a21 += _dot4(grow, r2 + 1, wid); a22 += _dot4(grow, r2 + 2, wid)
                gw[co, ci, 0, 0] = a00; gw[co, ci, 0, 1] = a01; gw[co, ci, 0, 2] = a02
                gw[co, ci, 1, 0] = a10; gw[co, ci, 1, 1] = a11; gw[co, ci, 1, 2] = a12
                gw[co, ci, 2, 0] = a20; gw[co, ci, 2, 1] = a21; gw[co, ci, 2, 2] = a22
    return gx_arr, gw_arr, gb_arr
