# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled backbone kernels; see _reference.py for the contracts."""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt

cnp.import_array()


def im2col3x3(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c * 9, h * w), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, yi, xi, di, dj, sy, sx, row, x0, x1
    with nogil:
        for b in range(n):
            for ci in range(c):
                for di in range(3):
                    for dj in range(3):
                        row = ci * 9 + di * 3 + dj
                        x0 = 1 if dj == 0 else 0
                        x1 = w - 1 if dj == 2 else w
                        for yi in range(h):
                            sy = yi + di - 1
                            if sy < 0 or sy >= h:
                                for xi in range(w):
                                    out[b, row, yi * w + xi] = 0
                                continue
                            if x0 == 1:
                                out[b, row, yi * w] = 0
                            if x1 == w - 1:
                                out[b, row, yi * w + w - 1] = 0
                            for xi in range(x0, x1):
                                out[b, row, yi * w + xi] = x[b, ci, sy, xi + dj - 1]
    return out_arr


def col2im3x3(floating[:, :, ::1] cols, shape):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, yi, xi, di, dj, sy, row, x0, x1
    # accumulate in (di, dj) order per output element, like the reference
    with nogil:
        for b in range(n):
            for ci in range(c):
                for di in range(3):
                    for dj in range(3):
                        row = ci * 9 + di * 3 + dj
                        x0 = 1 if dj == 0 else 0
                        x1 = w - 1 if dj == 2 else w
                        for yi in range(h):
                            sy = yi + di - 1
                            if sy < 0 or sy >= h:
                                continue
                            for xi in range(x0, x1):
                                out[b, ci, sy, xi + dj - 1] += cols[b, row, yi * w + xi]
    return out_arr


def maxpool2x2(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t h2 = h // 2, w2 = w // 2
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, h2, w2), dtype=dtype)
    arg_arr = np.empty((n, c, h2, w2), dtype=np.int8)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ci, yi, xi
    cdef floating a, bb, cc, d, m1, m2
    cdef int k1, k2
    with nogil:
        for b in range(n):
            for ci in range(c):
                for yi in range(h2):
                    for xi in range(w2):
                        a = x[b, ci, 2 * yi, 2 * xi]
                        bb = x[b, ci, 2 * yi, 2 * xi + 1]
                        cc = x[b, ci, 2 * yi + 1, 2 * xi]
                        d = x[b, ci, 2 * yi + 1, 2 * xi + 1]
                        # branch-free selects; ties go to the earlier element
                        m1 = a if a >= bb else bb
                        k1 = 0 if a >= bb else 1
                        m2 = cc if cc >= d else d
                        k2 = 2 if cc >= d else 3
                        out[b, ci, yi, xi] = m1 if m1 >= m2 else m2
                        arg[b, ci, yi, xi] = k1 if m1 >= m2 else k2
    return out_arr, arg_arr


def maxpool2x2_backward(floating[:, :, :, ::1] grad, cnp.int8_t[:, :, :, ::1] arg, shape):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t h2 = grad.shape[2], w2 = grad.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, yi, xi
    cdef cnp.int8_t k
    with nogil:
        for b in range(n):
            for ci in range(c):
                for yi in range(h2):
                    for xi in range(w2):
                        k = arg[b, ci, yi, xi]
                        out[b, ci, 2 * yi + (k >> 1), 2 * xi + (k & 1)] = grad[b, ci, yi, xi]
    return out_arr


def channel_stats(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], hw = x.shape[2] * x.shape[3]
    mean_arr = np.empty(c, dtype=np.float64)
    var_arr = np.empty(c, dtype=np.float64)
    cdef double[::1] mean = mean_arr, var = var_arr
    cdef floating[:, :, ::1] v = np.asarray(x).reshape(n, c, hw)
    cdef Py_ssize_t b, ci, i
    cdef double s, d, count = n * hw
    with nogil:
        for ci in range(c):
            s = 0
            for b in range(n):
                for i in range(hw):
                    s = s + v[b, ci, i]
            mean[ci] = s / count
            s = 0
            for b in range(n):
                for i in range(hw):
                    d = v[b, ci, i] - mean[ci]
                    s = s + d * d
            var[ci] = s / count
    return mean_arr, var_arr


def bn_apply(floating[:, :, :, ::1] x, double[::1] mean, double[::1] inv_std, gamma, beta):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], hw = x.shape[2] * x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    cdef double[::1] g = np.asarray(gamma, dtype=np.float64)
    cdef double[::1] bt = np.asarray(beta, dtype=np.float64)
    out_arr = np.empty((n, c, x.shape[2], x.shape[3]), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr.reshape(n, c, hw)
    cdef floating[:, :, ::1] v = np.asarray(x).reshape(n, c, hw)
    cdef Py_ssize_t b, ci, i
    cdef floating scale, shift
    with nogil:
        for ci in range(c):
            scale = <floating>(inv_std[ci] * g[ci])
            shift = <floating>(bt[ci] - mean[ci] * inv_std[ci] * g[ci])
            for b in range(n):
                for i in range(hw):
                    out[b, ci, i] = v[b, ci, i] * scale + shift
    return out_arr


def bn_backward(floating[:, :, :, ::1] grad, floating[:, :, :, ::1] x, double[::1] mean,
                double[::1] inv_std, gamma, bint training):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], hw = x.shape[2] * x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    cdef double[::1] gm = np.asarray(gamma, dtype=np.float64)
    gx_arr = np.empty((n, c, x.shape[2], x.shape[3]), dtype=dtype)
    ggamma_arr = np.empty(c, dtype=dtype)
    gbeta_arr = np.empty(c, dtype=dtype)
    cdef floating[:, :, ::1] gx = gx_arr.reshape(n, c, hw)
    cdef floating[:, :, ::1] gv = np.asarray(grad).reshape(n, c, hw)
    cdef floating[:, :, ::1] v = np.asarray(x).reshape(n, c, hw)
    cdef floating[::1] ggamma = ggamma_arr, gbeta = gbeta_arr
    cdef Py_ssize_t b, ci, i
    cdef double sg, sgx, xhat, count = n * hw, k, mu, s
    with nogil:
        for ci in range(c):
            mu = mean[ci]
            s = inv_std[ci]
            sg = 0
            sgx = 0
            for b in range(n):
                for i in range(hw):
                    sg = sg + gv[b, ci, i]
                    sgx = sgx + gv[b, ci, i] * (v[b, ci, i] - mu) * s
            ggamma[ci] = <floating>sgx
            gbeta[ci] = <floating>sg
            k = gm[ci] * s
            if training:
                for b in range(n):
                    for i in range(hw):
                        xhat = (v[b, ci, i] - mu) * s
                        gx[b, ci, i] = <floating>(k / count * (count * gv[b, ci, i] - sg - xhat * sgx))
            else:
                for b in range(n):
                    for i in range(hw):
                        gx[b, ci, i] = <floating>(k * gv[b, ci, i])
    return gx_arr, ggamma_arr, gbeta_arr
