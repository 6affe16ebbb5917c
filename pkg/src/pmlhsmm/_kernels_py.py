"""Pure numpy versions of the recursions in ``_kernels.pyx`` (same signatures)."""

import numpy as np


def _dense(indptr, indices, data):
    K = len(indptr) - 1
    rows = np.repeat(np.arange(K), np.diff(indptr))
    M = np.zeros((K, K))
    M[rows, indices] = data
    return M, rows


def forward(indptr, indices, data, init, dens, agg):
    dens = dens[:, agg]
    T, K = dens.shape
    G, _ = _dense(indptr, indices, data)
    alpha = np.zeros((T, K))
    logc = np.zeros(T)
    a = init * dens[0]
    for t in range(T):
        if t > 0:
            a = (alpha[t - 1] @ G) * dens[t]
        c = a.sum()
        if c <= 0.0:
            logc[t] = -np.inf
            break
        logc[t] = np.log(c)
        alpha[t] = a / c
    return alpha, logc


def backward_grad(indptr, indices, data, dens, agg, alpha, logc):
    N = dens.shape[1]
    dens = dens[:, agg]
    T, K = dens.shape
    G, rows = _dense(indptr, indices, data)
    beta = np.empty((T, K))
    beta[T - 1] = 1.0
    inv_c = np.exp(-logc)
    w = np.empty((T, K))
    for t in range(T - 1, 0, -1):
        w[t] = dens[t] * beta[t] * inv_c[t]
        beta[t - 1] = G @ w[t]
    onehot = np.zeros((K, N))
    onehot[np.arange(K), agg] = 1.0
    post = (alpha * beta) @ onehot
    grad_dense = alpha[:-1].T @ w[1:] if T > 1 else np.zeros((K, K))
    ginit = dens[0] * beta[0] * inv_c[0]
    return post, np.ascontiguousarray(grad_dense[rows, indices]), ginit


def viterbi(indptr, indices, logdata, loginit, logdens, agg):
    logdens = logdens[:, agg]
    T, K = logdens.shape
    L = np.full((K, K), -np.inf)
    rows = np.repeat(np.arange(K), np.diff(indptr))
    L[rows, indices] = logdata
    back = np.zeros((T, K), dtype=np.int64)
    score = loginit + logdens[0]
    for t in range(1, T):
        cand = score[:, None] + L
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(K)] + logdens[t]
    path = np.zeros(T, dtype=np.int64)
    path[-1] = int(np.argmax(score))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, float(score[path[-1]])
