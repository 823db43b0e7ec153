# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for the dense hot loops.

Serial, deterministic implementations.  The fused element-wise kernels
(relu, relu_backward, softmax_rows, adam_update) are the ones the composed
backend actually uses: fusion skips the temporaries numpy allocates.  The
matmul loops are kept as a second compiled reference, but lose to BLAS at
every training shape, so the backend routes products through numpy; see
benchmarks/bench_kernels.py.
"""

import numpy as np

from libc.math cimport exp, sqrt, pow


def matmul(double[:, ::1] a, double[:, ::1] b):
    # i-k-j order: the inner loop streams over contiguous rows
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double aik
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for p in range(k):
            aik = a[i, p]
            for j in range(m):
                out[i, j] += aik * b[p, j]
    return out_arr


def matmul_at(double[:, ::1] a, double[:, ::1] b):
    # a.T @ b for a (n, k), b (n, m) -> (k, m)
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double aip
    out_arr = np.zeros((k, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for p in range(k):
            aip = a[i, p]
            for j in range(m):
                out[p, j] += aip * b[i, j]
    return out_arr


def matmul_bt(double[:, ::1] a, double[:, ::1] b):
    # a @ b.T for a (n, k), b (m, k) -> (n, m); row-dot-row, fully contiguous
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[0]
    cdef Py_ssize_t i, j, p
    cdef double acc
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[j, p]
            out[i, j] = acc
    return out_arr


def relu(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef Py_ssize_t i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(m):
            out[i, j] = x[i, j] if x[i, j] > 0.0 else 0.0
    return out_arr


def relu_backward(double[:, ::1] x, double[:, ::1] upstream):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef Py_ssize_t i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(m):
            out[i, j] = upstream[i, j] if x[i, j] > 0.0 else 0.0
    return out_arr


def softmax_rows(double[:, ::1] logits):
    cdef Py_ssize_t n = logits.shape[0], m = logits.shape[1]
    cdef Py_ssize_t i, j
    cdef double row_max, total
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        row_max = logits[i, 0]
        for j in range(1, m):
            if logits[i, j] > row_max:
                row_max = logits[i, j]
        total = 0.0
        for j in range(m):
            out[i, j] = exp(logits[i, j] - row_max)
            total += out[i, j]
        for j in range(m):
            out[i, j] /= total
    return out_arr


def adam_update(double[::1] param, double[::1] grad, double[::1] m,
                double[::1] v, double lr, double beta1, double beta2,
                double eps, long t):
    cdef Py_ssize_t n = param.shape[0]
    cdef Py_ssize_t i
    cdef double bc1 = 1.0 - pow(beta1, <double> t)
    cdef double bc2 = 1.0 - pow(beta2, <double> t)
    cdef double g, m_hat, v_hat
    for i in range(n):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        m_hat = m[i] / bc1
        v_hat = v[i] / bc2
        param[i] -= lr * m_hat / (sqrt(v_hat) + eps)
