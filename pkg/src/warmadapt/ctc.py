"""Connectionist temporal classification loss.

The dynamic program lives in one of two interchangeable kernels:

* ``warmadapt._ctc_core`` — Cython, used when the compiled extension built;
* ``warmadapt._ctc_py``  — pure numpy, always available.

Set ``WARMADAPT_PURE=1`` to force the fallback (as the benchmark does).
``BACKEND`` reports which one is live. Both raise ValueError for label
sequences that no frame-length-T alignment can produce, rather than
returning an infinite loss with poisoned gradients.

Blank convention: the blank symbol is the LAST column of the log-prob
matrix, index ``K`` for a K-letter alphabet.
"""

import os

import numpy as np

from . import autodiff

if os.environ.get("WARMADAPT_PURE") == "1":
    from . import _ctc_py as _kernel

    BACKEND = "pure"
else:
    try:
        from . import _ctc_core as _kernel

        BACKEND = "compiled"
    except ImportError:  # extension not built on this machine
        from . import _ctc_py as _kernel

        BACKEND = "pure"


def min_frames(labels):
    """Fewest frames any CTC alignment of ``labels`` can occupy:
    one per label plus a mandatory blank between adjacent repeats."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return 0
    return int(labels.size + np.count_nonzero(labels[1:] == labels[:-1]))


def forward_backward(logp, labels):
    """Validated kernel call: (loss, dloss/dlogp) for one utterance.

    ``logp`` is (T, K+1) with blank last; ``labels`` holds indices in
    [0, K). Raises ValueError on out-of-range labels or T < min_frames.
    """
    logp = np.asarray(logp, dtype=np.float64)
    if logp.ndim != 2 or logp.shape[1] < 2:
        raise ValueError(f"logp must be (T, K+1) with K >= 1, got {logp.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    blank = logp.shape[1] - 1
    if labels.size and (labels.min() < 0 or labels.max() >= blank):
        raise ValueError(f"labels must lie in [0, {blank}); blank is implicit")
    need = min_frames(labels)
    if logp.shape[0] < need:
        raise ValueError(
            f"no alignment: {labels.size} labels need at least {need} frames, got {logp.shape[0]}"
        )
    return _kernel.forward_backward(logp, labels)


def greedy_decode(logp):
    """Best-path decode: argmax per frame, collapse repeats, drop blanks."""
    logp = np.asarray(logp)
    best = logp.argmax(axis=1)
    blank = logp.shape[1] - 1
    out = []
    prev = -1
    for k in best:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out


def ctc_loss(logp, labels):
    """Tape-recorded CTC loss: scalar Tensor from a (T, K+1) log-prob Tensor.

    The whole DP is a single custom op on the tape; its vector-Jacobian
    product is the kernel's gradient scaled by the upstream scalar.
    """
    loss, grad = forward_backward(logp.data, labels)
    out = autodiff.Tensor(np.asarray(loss), logp.tape, needs_grad=logp.needs_grad)
    if out.needs_grad:
        logp.tape.record_op(out, (logp,), lambda g: (float(g) * grad,))
    return out
