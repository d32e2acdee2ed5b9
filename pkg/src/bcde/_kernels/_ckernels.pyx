# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled elementwise kernels; same contract as ``_fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, fabs

cnp.import_array()

BACKEND = "cython"


cdef inline double _sigmoid(double v) nogil:
    cdef double e
    if v >= 0:
        return 1.0 / (1.0 + exp(-v))
    e = exp(v)
    return e / (1.0 + e)


def _flat(x):
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1)


def softplus(x):
    cdef double[::1] src = _flat(x)
    out = np.empty(src.shape[0], dtype=np.float64)
    cdef double[::1] dst = out
    cdef Py_ssize_t i
    cdef double v
    with nogil:
        for i in range(src.shape[0]):
            v = src[i]
            dst[i] = (v if v > 0 else 0.0) + log1p(exp(-fabs(v)))
    return out.reshape(np.shape(x))


def sigmoid(x):
    cdef double[::1] src = _flat(x)
    out = np.empty(src.shape[0], dtype=np.float64)
    cdef double[::1] dst = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(src.shape[0]):
            dst[i] = _sigmoid(src[i])
    return out.reshape(np.shape(x))


def relu(x):
    cdef double[::1] src = _flat(x)
    out = np.empty(src.shape[0], dtype=np.float64)
    cdef double[::1] dst = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(src.shape[0]):
            dst[i] = src[i] if src[i] > 0 else 0.0
    return out.reshape(np.shape(x))


def relu_backward(x, g):
    cdef double[::1] xs = _flat(x)
    cdef double[::1] gs = _flat(g)
    out = np.empty(xs.shape[0], dtype=np.float64)
    cdef double[::1] dst = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(xs.shape[0]):
            dst[i] = gs[i] if xs[i] > 0 else 0.0
    return out.reshape(np.shape(x))


def softplus_backward(x, g):
    cdef double[::1] xs = _flat(x)
    cdef double[::1] gs = _flat(g)
    out = np.empty(xs.shape[0], dtype=np.float64)
    cdef double[::1] dst = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(xs.shape[0]):
            dst[i] = gs[i] * _sigmoid(xs[i])
    return out.reshape(np.shape(x))


def sigmoid_backward(y, g):
    cdef double[::1] ys = _flat(y)
    cdef double[::1] gs = _flat(g)
    out = np.empty(ys.shape[0], dtype=np.float64)
    cdef double[::1] dst = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(ys.shape[0]):
            dst[i] = gs[i] * ys[i] * (1.0 - ys[i])
    return out.reshape(np.shape(y))


def tanh_backward(y, g):
    cdef double[::1] ys = _flat(y)
    cdef double[::1] gs = _flat(g)
    out = np.empty(ys.shape[0], dtype=np.float64)
    cdef double[::1] dst = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(ys.shape[0]):
            dst[i] = gs[i] * (1.0 - ys[i] * ys[i])
    return out.reshape(np.shape(y))


def logmeanexp(a):
    cdef double[:, ::1] src = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t k = src.shape[0], n = src.shape[1], i, j
    peak = np.array(src[0], dtype=np.float64)
    acc = np.zeros(n, dtype=np.float64)
    cdef double[::1] m = peak
    cdef double[::1] s = acc
    # row-major sweeps keep memory access contiguous
    with nogil:
        for i in range(1, k):
            for j in range(n):
                if src[i, j] > m[j]:
                    m[j] = src[i, j]
        for i in range(k):
            for j in range(n):
                s[j] = s[j] + exp(src[i, j] - m[j])
        for j in range(n):
            s[j] = m[j] + log(s[j] / k)
    return acc
