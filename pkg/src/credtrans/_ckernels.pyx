# cython: language_level=3
"""Compiled last-axis kernels. Every function mirrors one in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, erfc, M_SQRT1_2, M_PI

cnp.import_array()

cdef double INV_SQRT_2PI = 0.3989422804014327


def softmax_forward(const double[:, ::1] x):
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1], i, j
    out = np.empty((R, D), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double m, s
    for i in range(R):
        m = x[i, 0]
        for j in range(1, D):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(D):
            y[i, j] = exp(x[i, j] - m)
            s += y[i, j]
        s = 1.0 / s
        for j in range(D):
            y[i, j] *= s
    return out


def softmax_backward(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t R = y.shape[0], D = y.shape[1], i, j
    out = np.empty((R, D), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef double dot
    for i in range(R):
        dot = 0.0
        for j in range(D):
            dot += g[i, j] * y[i, j]
        for j in range(D):
            gx[i, j] = y[i, j] * (g[i, j] - dot)
    return out


def layer_norm_forward(const double[:, ::1] x, const double[::1] gamma,
                       const double[::1] beta, double eps):
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1], i, j
    y_arr = np.empty((R, D), dtype=np.float64)
    xhat_arr = np.empty((R, D), dtype=np.float64)
    rstd_arr = np.empty(R, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mean, var, d, r
    with nogil:
        for i in range(R):
            mean = 0.0
            for j in range(D):
                mean += x[i, j]
            mean /= D
            var = 0.0
            for j in range(D):
                d = x[i, j] - mean
                var += d * d
            var /= D
            r = 1.0 / sqrt(var + eps)
            rstd[i] = r
            for j in range(D):
                xhat[i, j] = (x[i, j] - mean) * r
                y[i, j] = xhat[i, j] * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(const double[:, ::1] g, const double[:, ::1] xhat,
                        const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t R = g.shape[0], D = g.shape[1], i, j
    gx_arr = np.empty((R, D), dtype=np.float64)
    dgamma_arr = np.zeros(D, dtype=np.float64)
    dbeta_arr = np.zeros(D, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double s1, s2, gh
    with nogil:
        for i in range(R):
            s1 = 0.0
            s2 = 0.0
            for j in range(D):
                gh = g[i, j] * gamma[j]
                s1 += gh
                s2 += gh * xhat[i, j]
                dgamma[j] += g[i, j] * xhat[i, j]
                dbeta[j] += g[i, j]
            for j in range(D):
                gh = g[i, j] * gamma[j]
                gx[i, j] = rstd[i] * (gh - (s1 + xhat[i, j] * s2) / D)
    return gx_arr, dgamma_arr, dbeta_arr


def gelu_forward(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] y = out
    with nogil:
        for i in range(n):
            y[i] = 0.5 * x[i] * erfc(-x[i] * M_SQRT1_2)
    return out


def gelu_backward(const double[::1] x, const double[::1] g):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] gx = out
    cdef double cdf, pdf
    with nogil:
        for i in range(n):
            cdf = 0.5 * erfc(-x[i] * M_SQRT1_2)
            pdf = INV_SQRT_2PI * exp(-0.5 * x[i] * x[i])
            gx[i] = g[i] * (cdf + x[i] * pdf)
    return out


def ple_forward(const double[::1] x, const double[::1] bounds):
    cdef Py_ssize_t n = x.shape[0], B = bounds.shape[0] - 1, i, j
    out = np.empty((n, B), dtype=np.float64)
    cdef double[:, ::1] e = out
    cdef double lo, hi, xi
    with nogil:
        for i in range(n):
            xi = x[i]
            for j in range(B):
                lo = bounds[j]
                hi = bounds[j + 1]
                if xi >= hi:
                    e[i, j] = 1.0
                elif xi < lo:
                    e[i, j] = 0.0
                else:
                    e[i, j] = (xi - lo) / (hi - lo)
    return out


def ple_backward(const double[::1] x, const double[::1] bounds,
                 const double[:, ::1] g):
    cdef Py_ssize_t n = x.shape[0], B = bounds.shape[0] - 1, i, j
    gx_arr = np.zeros(n, dtype=np.float64)
    gb_arr = np.zeros(B + 1, dtype=np.float64)
    cdef double[::1] gx = gx_arr
    cdef double[::1] gb = gb_arr
    cdef double lo, hi, xi, w, e
    with nogil:
        for i in range(n):
            xi = x[i]
            for j in range(B):
                lo = bounds[j]
                hi = bounds[j + 1]
                if lo <= xi < hi:
                    w = hi - lo
                    e = (xi - lo) / w
                    gx[i] += g[i, j] / w
                    gb[j] -= g[i, j] * (1.0 - e) / w
                    gb[j + 1] -= g[i, j] * e / w
    return gx_arr, gb_arr
