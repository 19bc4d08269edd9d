"""Pure-numpy CTC forward/backward kernel (reference + fallback backend).

Mirrors warmadapt._ctc_core exactly; the dispatcher in warmadapt.ctc picks
whichever is available. Kept vectorized over the extended-label axis so the
fallback stays usable, but the time loop is Python — the compiled kernel
exists because this is the innermost loop of every training step.
"""

import numpy as np

NEG_INF = -np.inf


def forward_backward(logp, labels):
    """CTC negative log-likelihood and its gradient w.r.t. log-probs.

    Parameters
    ----------
    logp : (T, K+1) float64
        Per-frame log-probabilities, blank in the LAST column (index K).
    labels : (U,) int array
        Label indices in [0, K). May be empty.

    Returns
    -------
    loss : float
    grad : (T, K+1) float64, d loss / d logp
    """
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    T, kp1 = logp.shape
    blank = kp1 - 1
    U = labels.shape[0]
    S = 2 * U + 1

    # extended sequence: blank, l1, blank, l2, ..., lU, blank
    z = np.full(S, blank, dtype=np.int64)
    z[1::2] = labels
    # a skip (s-2 -> s) is legal onto a label position whose label differs
    # from the previous label position's
    skip = np.zeros(S, dtype=bool)
    if U > 1:
        skip[3::2] = labels[1:] != labels[:-1]

    emit = logp[:, z]  # (T, S)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        stay = alpha[t - 1]
        prev = np.full(S, NEG_INF)
        prev[1:] = alpha[t - 1, :-1]
        a = np.logaddexp(stay, prev)
        if U > 1:
            jump = np.full(S, NEG_INF)
            jump[2:] = np.where(skip[2:], alpha[t - 1, :-2], NEG_INF)
            a = np.logaddexp(a, jump)
        alpha[t] = a + emit[t]

    tail = alpha[T - 1, S - 1]
    if S > 1:
        tail = np.logaddexp(tail, alpha[T - 1, S - 2])
    if not np.isfinite(tail):
        raise ValueError("no alignment: label sequence not representable in the given frames")
    loss = -float(tail)

    # beta excludes the current frame's emission
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        if U > 1:
            b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b

    # occupancy gamma[t,s] = alpha + beta - logP, folded per symbol
    grad = np.zeros((T, kp1))
    logP = -loss
    gamma = alpha + beta - logP
    occ = np.exp(gamma)
    for s in range(S):
        grad[:, z[s]] -= occ[:, s]
    return loss, grad
