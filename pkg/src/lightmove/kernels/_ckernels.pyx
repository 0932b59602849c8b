# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot numeric kernels.

Same contracts as `_npkernels`: float64 in, fresh float64 out. Only the
kernels where a fused single pass actually wins are compiled (the branchy
sigmoid, the gradient expressions, row softmax); matmul stays on numpy's
BLAS and tanh on numpy's vectorized loop, which no plain C loop beats.
benchmarks/kernel_bench.py holds the receipts.
"""

from libc.math cimport exp as c_exp

import numpy as np


def matmul(a, b):
    # BLAS through numpy; a hand-rolled loop loses at every size
    return a @ b


cdef inline double _sig(double v) nogil:
    cdef double e
    if v >= 0.0:
        return 1.0 / (1.0 + c_exp(-v))
    e = c_exp(v)
    return e / (1.0 + e)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    flat = np.ascontiguousarray(x.reshape(-1))
    out = np.empty_like(flat)
    cdef double[::1] xv = flat
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = xv.shape[0]
    for i in range(n):
        ov[i] = _sig(xv[i])
    return out.reshape(x.shape)


def sigmoid_grad(y, g):
    y = np.asarray(y, dtype=np.float64)
    yf = np.ascontiguousarray(y.reshape(-1))
    gf = np.ascontiguousarray(np.asarray(g, dtype=np.float64).reshape(-1))
    out = np.empty_like(yf)
    cdef double[::1] yv = yf
    cdef double[::1] gv = gf
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = yv.shape[0]
    for i in range(n):
        ov[i] = gv[i] * yv[i] * (1.0 - yv[i])
    return out.reshape(y.shape)


def tanh(x):
    # numpy's vectorized tanh outruns a scalar libc loop by 5-10x
    return np.tanh(x)


def tanh_grad(y, g):
    y = np.asarray(y, dtype=np.float64)
    yf = np.ascontiguousarray(y.reshape(-1))
    gf = np.ascontiguousarray(np.asarray(g, dtype=np.float64).reshape(-1))
    out = np.empty_like(yf)
    cdef double[::1] yv = yf
    cdef double[::1] gv = gf
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = yv.shape[0]
    for i in range(n):
        ov[i] = gv[i] * (1.0 - yv[i] * yv[i])
    return out.reshape(y.shape)


def softmax_rows(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] xv = x
    cdef Py_ssize_t m = xv.shape[0], n = xv.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j
    cdef double mx, s
    for i in range(m):
        mx = xv[i, 0]
        for j in range(1, n):
            if xv[i, j] > mx:
                mx = xv[i, j]
        s = 0.0
        for j in range(n):
            ov[i, j] = c_exp(xv[i, j] - mx)
            s += ov[i, j]
        for j in range(n):
            ov[i, j] /= s
    return out


def softmax_rows_grad(y, g):
    y = np.ascontiguousarray(y, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] gv = g
    cdef Py_ssize_t m = yv.shape[0], n = yv.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += gv[i, j] * yv[i, j]
        for j in range(n):
            ov[i, j] = yv[i, j] * (gv[i, j] - dot)
    return out
