"""Numpy implementations of the hot numeric kernels.

This is the pure-python fallback backend; `lightmove.kernels._ckernels`
implements the same functions in Cython. Both operate on float64 ndarrays
and return fresh arrays.
"""

import numpy as np


def matmul(a, b):
    return a @ b


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(y, g):
    return g * y * (1.0 - y)


def tanh(x):
    return np.tanh(x)


def tanh_grad(y, g):
    return g * (1.0 - y * y)


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def softmax_rows_grad(y, g):
    dot = (g * y).sum(axis=1, keepdims=True)
    return y * (g - dot)
