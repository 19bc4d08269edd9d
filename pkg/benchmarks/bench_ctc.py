#!/usr/bin/env python3
"""Time the compiled CTC kernel against the pure-numpy fallback.

Both kernels implement the same forward/backward dynamic program; this
script runs identical workloads through each and reports per-call time
and speedup. Agreement of loss values is asserted as it goes, so a
mismatch aborts the benchmark rather than producing a pretty table over
wrong numbers.

Usage:
    python benchmarks/bench_ctc.py [--repeats 200] [--seed 0]
"""

import argparse
import time

import numpy as np

from warmadapt import _ctc_py

try:
    from warmadapt import _ctc_core
except ImportError:
    _ctc_core = None

# (frames, alphabet letters, label count) — small = one model frame step,
# large = a whole long utterance
SHAPES = [
    (16, 8, 4),
    (50, 27, 12),
    (120, 27, 30),
    (400, 40, 80),
]


def make_case(rng, frames, letters, n_labels):
    logits = rng.normal(size=(frames, letters + 1))
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    # sprinkle repeats but keep the sequence feasible for `frames`
    labels = rng.integers(0, letters, size=n_labels)
    return logp, labels


def bench(kernel, cases, repeats):
    # warm up once so import/JIT costs don't land in the timing
    for logp, labels in cases:
        kernel.forward_backward(logp, labels)
    t0 = time.perf_counter()
    sink = 0.0
    for _ in range(repeats):
        for logp, labels in cases:
            loss, _ = kernel.forward_backward(logp, labels)
            sink += loss
    return (time.perf_counter() - t0) / repeats, sink


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=200, help="timed passes per shape")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if _ctc_core is None:
        print("compiled kernel not built (pip install -e . builds it); timing fallback only")

    rng = np.random.default_rng(args.seed)
    print(f"{'shape (T, K, U)':>18} {'pure ms':>10} {'compiled ms':>12} {'speedup':>8}")
    for shape in SHAPES:
        cases = [make_case(rng, *shape) for _ in range(4)]
        t_py, sum_py = bench(_ctc_py, cases, args.repeats)
        line = f"{str(shape):>18} {t_py * 1000:>10.3f}"
        if _ctc_core is not None:
            t_cy, sum_cy = bench(_ctc_core, cases, args.repeats)
            if not np.isclose(sum_py, sum_cy, rtol=0, atol=1e-6 * args.repeats):
                raise SystemExit(f"kernels disagree on {shape}: {sum_py} vs {sum_cy}")
            line += f" {t_cy * 1000:>12.3f} {t_py / t_cy:>7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
