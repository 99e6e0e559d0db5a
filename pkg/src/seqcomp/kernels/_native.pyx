# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused single-pass kernels for the graph engine's rowwise hot ops.

Same contracts as ``pyref``: 2-D C-contiguous input, reduction over the
last axis, float32 or float64. Loops are single-threaded so results are
reproducible run to run.
"""

import numpy as np

cimport cython
from libc.math cimport exp, sqrt, tanh

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715

BACKEND_NAME = "native"


def gelu_fwd(real[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    out = np.empty((rows, cols), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] y = out
    cdef double v, u
    for i in range(rows):
        for j in range(cols):
            v = x[i, j]
            u = GELU_C * (v + GELU_A * v * v * v)
            y[i, j] = <real> (0.5 * v * (1.0 + tanh(u)))
    return out


def gelu_bwd(real[:, ::1] x, real[:, ::1] gy):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    out = np.empty((rows, cols), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] gx = out
    cdef double v, v2, u, t, du
    for i in range(rows):
        for j in range(cols):
            v = x[i, j]
            v2 = v * v
            u = GELU_C * (v + GELU_A * v * v2)
            t = tanh(u)
            du = GELU_C * (1.0 + 3.0 * GELU_A * v2)
            gx[i, j] = <real> (gy[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))
    return out


def softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    out = np.empty((rows, cols), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] p = out
    cdef double m, s, e
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, cols):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(cols):
            e = exp(x[i, j] - m)
            p[i, j] = <real> e
            s += e
        for j in range(cols):
            p[i, j] = <real> (p[i, j] / s)
    return out


def softmax_bwd(real[:, ::1] p, real[:, ::1] gy):
    cdef Py_ssize_t rows = p.shape[0], cols = p.shape[1], i, j
    out = np.empty((rows, cols), dtype=np.asarray(p).dtype)
    cdef real[:, ::1] gx = out
    cdef double dot
    for i in range(rows):
        dot = 0.0
        for j in range(cols):
            dot += gy[i, j] * p[i, j]
        for j in range(cols):
            gx[i, j] = <real> (p[i, j] * (gy[i, j] - dot))
    return out


def layernorm_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    dtype = np.asarray(x).dtype
    out = np.empty((rows, cols), dtype=dtype)
    mean_out = np.empty(rows, dtype=dtype)
    rstd_out = np.empty(rows, dtype=dtype)
    cdef real[:, ::1] y = out
    cdef real[::1] mean = mean_out, rstd = rstd_out
    cdef double m, v, d, r
    for i in range(rows):
        m = 0.0
        for j in range(cols):
            m += x[i, j]
        m /= cols
        v = 0.0
        for j in range(cols):
            d = x[i, j] - m
            v += d * d
        v /= cols
        r = 1.0 / sqrt(v + eps)
        mean[i] = <real> m
        rstd[i] = <real> r
        for j in range(cols):
            y[i, j] = <real> ((x[i, j] - m) * r * gamma[j] + beta[j])
    return out, mean_out, rstd_out


def layernorm_bwd(real[:, ::1] x, real[::1] gamma, real[::1] mean,
                  real[::1] rstd, real[:, ::1] gy):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    dtype = np.asarray(x).dtype
    gx_out = np.empty((rows, cols), dtype=dtype)
    dgamma_out = np.zeros(cols, dtype=dtype)
    dbeta_out = np.zeros(cols, dtype=dtype)
    cdef real[:, ::1] gx = gx_out
    cdef real[::1] dgamma = dgamma_out, dbeta = dbeta_out
    cdef double m, r, xh, dxh, m1, m2
    for i in range(rows):
        m = mean[i]
        r = rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(cols):
            xh = (x[i, j] - m) * r
            dxh = gy[i, j] * gamma[j]
            m1 += dxh
            m2 += dxh * xh
            dgamma[j] += <real> (gy[i, j] * xh)
            dbeta[j] += gy[i, j]
        m1 /= cols
        m2 /= cols
        for j in range(cols):
            xh = (x[i, j] - m) * r
            gx[i, j] = <real> (r * (gy[i, j] * gamma[j] - m1 - xh * m2))
    return gx_out, dgamma_out, dbeta_out
