# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Gaussian-mixture kernels.  See ``_kernels_py`` for the contract."""
import numpy as np

cimport cython


def component_terms(const double[:, ::1] x, const double[:, ::1] means,
                    const double[:, :, ::1] precisions, const double[::1] log_consts):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t K = means.shape[0]
    logp_arr = np.empty((n, K), dtype=np.float64)
    grad_arr = np.empty((n, K, d), dtype=np.float64)
    diff_arr = np.empty(d, dtype=np.float64)
    cdef double[:, ::1] logp = logp_arr
    cdef double[:, :, ::1] grad = grad_arr
    cdef double[::1] diff = diff_arr
    cdef Py_ssize_t i, k, a, b
    cdef double acc, quad
    with nogil:
        for i in range(n):
            for k in range(K):
                for a in range(d):
                    diff[a] = x[i, a] - means[k, a]
                quad = 0.0
                for a in range(d):
                    acc = 0.0
                    for b in range(d):
                        acc = acc + precisions[k, a, b] * diff[b]
                    grad[i, k, a] = -acc
                    quad = quad + diff[a] * acc
                logp[i, k] = log_consts[k] - 0.5 * quad
    return logp_arr, grad_arr
