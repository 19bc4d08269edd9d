# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled CTC forward/backward kernel.

Same contract as warmadapt._ctc_py.forward_backward; this is the hot inner
loop of every training step, so the whole DP runs in C.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, isinf, log1p

cnp.import_array()

cdef double NEG_INF = -np.inf


cdef inline double lae(double a, double b) noexcept:
    # log(exp(a) + exp(b)) with -inf treated as absorbing zero
    if isinf(a) and a < 0:
        return b
    if isinf(b) and b < 0:
        return a
    if a >= b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def forward_backward(logp, labels):
    """CTC negative log-likelihood and gradient w.r.t. log-probs.

    logp: (T, K+1) float64, blank in the last column. labels: (U,) ints.
    Returns (loss, grad) with grad shaped like logp.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2] lp = np.ascontiguousarray(logp, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t T = lp.shape[0]
    cdef Py_ssize_t kp1 = lp.shape[1]
    cdef Py_ssize_t blank = kp1 - 1
    cdef Py_ssize_t U = lab.shape[0]
    cdef Py_ssize_t S = 2 * U + 1
    cdef Py_ssize_t t, s

    cdef cnp.ndarray[cnp.int64_t, ndim=1] z = np.full(S, blank, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] skip = np.zeros(S, dtype=np.uint8)
    for s in range(U):
        z[2 * s + 1] = lab[s]
    for s in range(1, U):
        if lab[s] != lab[s - 1]:
            skip[2 * s + 1] = 1

    cdef cnp.ndarray[cnp.float64_t, ndim=2] alpha = np.full((T, S), NEG_INF)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] beta = np.full((T, S), NEG_INF)
    cdef double a, nxt

    alpha[0, 0] = lp[0, z[0]]
    if S > 1:
        alpha[0, 1] = lp[0, z[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = lae(a, alpha[t - 1, s - 1])
            if s >= 2 and skip[s]:
                a = lae(a, alpha[t - 1, s - 2])
            alpha[t, s] = a + lp[t, z[s]]

    cdef double tail = alpha[T - 1, S - 1]
    if S > 1:
        tail = lae(tail, alpha[T - 1, S - 2])
    if isinf(tail):
        raise ValueError("no alignment: label sequence not representable in the given frames")

    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            nxt = beta[t + 1, s] + lp[t + 1, z[s]]
            if s + 1 < S:
                nxt = lae(nxt, beta[t + 1, s + 1] + lp[t + 1, z[s + 1]])
            if s + 2 < S and skip[s + 2]:
                nxt = lae(nxt, beta[t + 1, s + 2] + lp[t + 1, z[s + 2]])
            beta[t, s] = nxt

    cdef cnp.ndarray[cnp.float64_t, ndim=2] grad = np.zeros((T, kp1))
    cdef double g
    for t in range(T):
        for s in range(S):
            g = alpha[t, s] + beta[t, s] - tail
            if not (isinf(g) and g < 0):
                grad[t, z[s]] -= exp(g)
    return -tail, grad
