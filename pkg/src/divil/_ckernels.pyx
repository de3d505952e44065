# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_fallback``."""

import numpy as np

from libc.math cimport exp, log


def softmax_rows_inplace(double[:, ::1] logits):
    cdef Py_ssize_t n = logits.shape[0], m = logits.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, total, inv
    out = np.empty(n)
    cdef double[::1] lse = out
    with nogil:
        for i in range(n):
            mx = logits[i, 0]
            for j in range(1, m):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            total = 0.0
            for j in range(m):
                logits[i, j] = exp(logits[i, j] - mx)
                total = total + logits[i, j]
            inv = 1.0 / total
            for j in range(m):
                logits[i, j] = logits[i, j] * inv
            lse[i] = log(total) + mx
    return out


def distance_logits_inplace(double[:, ::1] gram, double[::1] sq, double[::1] pos,
                            double scale):
    cdef Py_ssize_t n = gram.shape[0]
    cdef Py_ssize_t i, j
    cdef double si, c = -2.0 * scale
    with nogil:
        for i in range(n):
            si = scale * sq[i]
            for j in range(n):
                gram[i, j] = c * gram[i, j] + si + scale * sq[j]
            gram[i, i] = scale * pos[i]


def distance_softmax_inplace(double[:, ::1] gram, double[::1] sq, double[::1] pos,
                             double scale):
    """Fused ``distance_logits_inplace`` + ``softmax_rows_inplace``.

    Returns the per-row log-sum-exp and leaves row-softmax probabilities in
    ``gram``.
    """
    cdef Py_ssize_t n = gram.shape[0]
    cdef Py_ssize_t i, j
    cdef double si, mx, total, inv, v, c = -2.0 * scale
    out = np.empty(n)
    cdef double[::1] lse = out
    with nogil:
        for i in range(n):
            si = scale * sq[i]
            mx = scale * pos[i]
            for j in range(n):
                v = c * gram[i, j] + si + scale * sq[j]
                gram[i, j] = v
                if v > mx and j != i:
                    mx = v
            gram[i, i] = scale * pos[i]
            total = 0.0
            for j in range(n):
                v = exp(gram[i, j] - mx)
                gram[i, j] = v
                total = total + v
            inv = 1.0 / total
            for j in range(n):
                gram[i, j] = gram[i, j] * inv
            lse[i] = log(total) + mx
    return out
