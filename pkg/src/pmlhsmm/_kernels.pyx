# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled forward/backward/Viterbi recursions over a CSR transition matrix."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, exp, INFINITY

cnp.import_array()

ctypedef cnp.int64_t idx_t


def forward(const idx_t[::1] indptr, const idx_t[::1] indices, const double[::1] data,
            const double[::1] init, const double[:, ::1] dens, const idx_t[::1] agg):
    """Scaled forward pass; returns (alpha_hat, log_scale).

    ``dens`` holds state-level densities (T, N); sub-state ``k`` uses column
    ``agg[k]``.
    """
    cdef Py_ssize_t T = dens.shape[0], K = agg.shape[0]
    cdef Py_ssize_t t, k, l, e
    cdef double c, a
    alpha_np = np.zeros((T, K))
    logc_np = np.zeros(T)
    cdef double[:, ::1] alpha = alpha_np
    cdef double[::1] logc = logc_np
    with nogil:
        c = 0.0
        for k in range(K):
            a = init[k] * dens[0, agg[k]]
            alpha[0, k] = a
            c += a
        if c <= 0.0:
            logc[0] = -INFINITY
        else:
            logc[0] = log(c)
            for k in range(K):
                alpha[0, k] /= c
            for t in range(1, T):
                for k in range(K):
                    a = alpha[t - 1, k]
                    if a == 0.0:
                        continue
                    for e in range(indptr[k], indptr[k + 1]):
                        alpha[t, indices[e]] += a * data[e]
                c = 0.0
                for l in range(K):
                    alpha[t, l] *= dens[t, agg[l]]
                    c += alpha[t, l]
                if c <= 0.0:
                    logc[t] = -INFINITY
                    break
                logc[t] = log(c)
                for l in range(K):
                    alpha[t, l] /= c
    return alpha_np, logc_np


def backward_grad(const idx_t[::1] indptr, const idx_t[::1] indices, const double[::1] data,
                  const double[:, ::1] dens, const idx_t[::1] agg,
                  const double[:, ::1] alpha, const double[::1] logc):
    """Scaled backward pass with likelihood gradients.

    Returns the state-level posteriors (T, N), d loglik / d TPM at each
    stored non-zero, and d loglik / d initial vector.
    """
    cdef Py_ssize_t T = dens.shape[0], N = dens.shape[1], K = agg.shape[0], nnz = data.shape[0]
    cdef Py_ssize_t t, k, l, e
    cdef double s, a, inv_c
    post_np = np.zeros((T, N))
    grad_np = np.zeros(nnz)
    ginit_np = np.empty(K)
    beta_np = np.ones(K)
    w_np = np.empty(K)
    cdef double[:, ::1] post = post_np
    cdef double[::1] grad = grad_np
    cdef double[::1] ginit = ginit_np
    cdef double[::1] beta = beta_np
    cdef double[::1] w = w_np
    with nogil:
        for k in range(K):
            post[T - 1, agg[k]] += alpha[T - 1, k]
        for t in range(T - 1, 0, -1):
            inv_c = exp(-logc[t])
            for l in range(K):
                w[l] = dens[t, agg[l]] * beta[l] * inv_c
            for k in range(K):
                a = alpha[t - 1, k]
                s = 0.0
                for e in range(indptr[k], indptr[k + 1]):
                    l = indices[e]
                    s += data[e] * w[l]
                    grad[e] += a * w[l]
                beta[k] = s
                post[t - 1, agg[k]] += a * s
        inv_c = exp(-logc[0])
        for k in range(K):
            ginit[k] = dens[0, agg[k]] * beta[k] * inv_c
    return post_np, grad_np, ginit_np


def viterbi(const idx_t[::1] indptr, const idx_t[::1] indices, const double[::1] logdata,
            const double[::1] loginit, const double[:, ::1] logdens, const idx_t[::1] agg):
    """Most probable sub-state path; ties go to the lower predecessor index."""
    cdef Py_ssize_t T = logdens.shape[0], K = agg.shape[0]
    cdef Py_ssize_t t, k, l, e, best
    cdef double v, bestv
    score_np = np.empty(K)
    nxt_np = np.empty(K)
    back_np = np.zeros((T, K), dtype=np.int64)
    path_np = np.zeros(T, dtype=np.int64)
    cdef double[::1] score = score_np
    cdef double[::1] nxt = nxt_np
    cdef idx_t[:, ::1] back = back_np
    cdef idx_t[::1] path = path_np
    with nogil:
        for k in range(K):
            score[k] = loginit[k] + logdens[0, agg[k]]
        for t in range(1, T):
            for l in range(K):
                nxt[l] = -INFINITY
                back[t, l] = 0
            for k in range(K):
                for e in range(indptr[k], indptr[k + 1]):
                    l = indices[e]
                    v = score[k] + logdata[e]
                    if v > nxt[l]:
                        nxt[l] = v
                        back[t, l] = k
            for l in range(K):
                score[l] = nxt[l] + logdens[t, agg[l]]
        best = 0
        bestv = score[0]
        for k in range(1, K):
            if score[k] > bestv:
                bestv = score[k]
                best = k
        path[T - 1] = best
        for t in range(T - 1, 0, -1):
            path[t - 1] = back[t, path[t]]
    return path_np, bestv
