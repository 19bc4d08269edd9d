"""Alignment loss: kernel vs. exhaustive enumeration, plus backend parity.

The enumeration oracle sums over every frame labelling, so agreement is a
strong statement about both the lattice recursion and its gradient.
"""

import importlib

import numpy as np
import pytest

from warmadapt import autodiff as ad
from warmadapt import ctc
from warmadapt import _ctc_py

from oracles import collapse, ctc_by_enumeration

try:
    from warmadapt import _ctc_core
except ImportError:
    _ctc_core = None


def random_logp(rng, T, width):
    x = rng.normal(size=(T, width)) * 2.0
    x -= np.log(np.exp(x).sum(axis=1, keepdims=True))
    return x


def random_feasible_case(rng):
    """A (logp, labels) pair the lattice can actually align."""
    T = int(rng.integers(1, 5))
    K = int(rng.integers(1, 4))
    while True:
        U = int(rng.integers(0, 3))
        labels = rng.integers(0, K, size=U).tolist()
        if ctc.min_frames(labels) <= T:
            return random_logp(rng, T, K + 1), labels


def test_loss_and_grad_match_enumeration():
    rng = np.random.default_rng(42)
    cases = 0
    while cases < 250:
        logp, labels = random_feasible_case(rng)
        want_loss, want_grad = ctc_by_enumeration(logp, labels)
        got_loss, got_grad = ctc.forward_backward(logp, labels)
        assert abs(got_loss - want_loss) < 1e-8, (labels, logp.shape)
        assert np.max(np.abs(got_grad - want_grad)) < 1e-8, (labels, logp.shape)
        cases += 1


def test_empty_target_reduces_to_all_blank_path():
    rng = np.random.default_rng(3)
    for T in (1, 2, 5):
        logp = random_logp(rng, T, 4)
        loss, grad = ctc.forward_backward(logp, [])
        assert np.isclose(loss, -logp[:, -1].sum())
        want = np.zeros_like(logp)
        want[:, -1] = -1.0  # blank posterior is exactly one on every frame
        assert np.allclose(grad, want)


def test_gradient_against_finite_differences():
    rng = np.random.default_rng(11)
    logp = random_logp(rng, 6, 5)
    labels = [0, 2, 2, 1]
    _, grad = ctc.forward_backward(logp, labels)
    eps = 1e-6
    num = np.zeros_like(logp)
    for t in range(logp.shape[0]):
        for k in range(logp.shape[1]):
            up = logp.copy()
            up[t, k] += eps
            dn = logp.copy()
            dn[t, k] -= eps
            lu, _ = ctc.forward_backward(up, labels)
            ld, _ = ctc.forward_backward(dn, labels)
            num[t, k] = (lu - ld) / (2 * eps)
    assert np.max(np.abs(grad - num)) < 1e-7


def test_grad_rows_sum_to_label_posterior_mass():
    # each frame emits exactly one symbol, so -grad sums to 1 per frame
    rng = np.random.default_rng(12)
    logp = random_logp(rng, 7, 6)
    _, grad = ctc.forward_backward(logp, [1, 4, 1])
    assert np.allclose(grad.sum(axis=1), -1.0)


def test_infeasible_targets_raise_instead_of_returning_inf():
    rng = np.random.default_rng(5)
    logp = random_logp(rng, 2, 4)
    with pytest.raises(ValueError):
        ctc.forward_backward(logp, [1, 1])  # repeat needs 3 frames
    with pytest.raises(ValueError):
        ctc.forward_backward(logp, [0, 1, 2])
    with pytest.raises(ValueError):
        ctc.forward_backward(logp, [3])  # only indices 0..2 exist; 3 is blank
    with pytest.raises(ValueError):
        ctc.forward_backward(logp, [-1])
    with pytest.raises(ValueError):
        ctc.forward_backward(rng.normal(size=(4,)), [0])


def test_min_frames():
    assert ctc.min_frames([]) == 0
    assert ctc.min_frames([2]) == 1
    assert ctc.min_frames([2, 2]) == 3
    assert ctc.min_frames([2, 1]) == 2
    assert ctc.min_frames([1, 1, 1]) == 5
    assert ctc.min_frames([0, 1, 1, 0]) == 5


def test_greedy_decode_collapses_then_strips():
    # blank is the last column (index 3 here)
    logp = np.log(
        np.array(
            [
                [0.9, 0.05, 0.02, 0.03],
                [0.9, 0.05, 0.02, 0.03],
                [0.02, 0.03, 0.05, 0.9],
                [0.9, 0.05, 0.02, 0.03],
                [0.05, 0.9, 0.02, 0.03],
            ]
        )
    )
    assert ctc.greedy_decode(logp) == [0, 0, 1]


def test_greedy_decode_agrees_with_oracle_collapse():
    rng = np.random.default_rng(13)
    for _ in range(50):
        logp = random_logp(rng, int(rng.integers(1, 9)), int(rng.integers(2, 6)))
        best = logp.argmax(axis=1).tolist()
        assert ctc.greedy_decode(logp) == collapse(best, logp.shape[1] - 1)


def test_backends_agree_bitwise_tightly():
    if _ctc_core is None:
        pytest.skip("compiled kernel not built")
    rng = np.random.default_rng(99)
    for _ in range(100):
        T = int(rng.integers(1, 12))
        K = int(rng.integers(1, 7))
        labels = []
        U = int(rng.integers(0, 5))
        trial = rng.integers(0, K, size=U).tolist()
        if ctc.min_frames(trial) <= T:
            labels = trial
        logp = random_logp(rng, T, K + 1)
        l1, g1 = _ctc_py.forward_backward(logp, np.asarray(labels, dtype=np.int64))
        l2, g2 = _ctc_core.forward_backward(logp, np.asarray(labels, dtype=np.int64))
        assert abs(l1 - l2) < 1e-12
        assert np.max(np.abs(g1 - g2)) < 1e-12


def test_pure_env_override_selects_fallback(monkeypatch):
    monkeypatch.setenv("WARMADAPT_PURE", "1")
    mod = importlib.reload(ctc)
    try:
        assert mod.BACKEND == "pure"
    finally:
        monkeypatch.delenv("WARMADAPT_PURE")
        importlib.reload(ctc)


def test_ctc_loss_records_one_op_and_backprops():
    rng = np.random.default_rng(21)
    logits = rng.normal(size=(5, 4))
    labels = [0, 2]

    tape = ad.Tape()
    p = tape.param("logits", logits)
    loss = ctc.ctc_loss(ad.log_softmax(p), labels)
    grads = ad.backward(tape, loss)
    assert tape.num_ops() == 2  # log_softmax + the DP itself

    eps = 1e-6
    num = np.zeros_like(logits)
    for t in range(logits.shape[0]):
        for k in range(logits.shape[1]):
            for sign, slot in ((1, 0), (-1, 1)):
                x = logits.copy()
                x[t, k] += sign * eps
                tp = ad.Tape()
                val = ctc.ctc_loss(ad.log_softmax(tp.const(x)), labels)
                if slot == 0:
                    up = float(val.data)
                else:
                    dn = float(val.data)
            num[t, k] = (up - dn) / (2 * eps)
    assert np.max(np.abs(grads["logits"] - num)) < 1e-6


def test_ctc_loss_on_const_input_stays_unrecorded():
    rng = np.random.default_rng(22)
    tape = ad.Tape()
    x = tape.const(random_logp(rng, 4, 3))
    out = ctc.ctc_loss(x, [0])
    assert out.needs_grad is False
    assert tape.num_ops() == 0
