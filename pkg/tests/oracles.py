"""Slow, independent reference implementations used to check the real ones.

Everything in here trades speed for obviousness: exhaustive enumeration,
full recursion, triple loops.  Nothing imports from warmadapt, so a bug in
the package can't hide in its own oracle.
"""

import itertools
from functools import lru_cache

import numpy as np


# ---------------------------------------------------------------------------
# alignment-loss oracle: enumerate every frame labelling
# ---------------------------------------------------------------------------

def collapse(seq, blank):
    """Remove consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for s in seq:
        if s != prev:
            out.append(s)
        prev = s
    return [s for s in out if s != blank]


def ctc_by_enumeration(logp, labels):
    """Loss and gradient by summing over all (K+1)^T frame labellings.

    logp: (T, K+1) log-probabilities, blank in the last column.
    Returns (loss, grad) where grad is d loss / d logp.  Only usable for
    tiny T and K; that is the point.
    """
    logp = np.asarray(logp, dtype=float)
    T, width = logp.shape
    blank = width - 1
    labels = list(labels)
    p = np.exp(logp)
    total = 0.0
    post = np.zeros_like(p)
    for seq in itertools.product(range(width), repeat=T):
        if collapse(seq, blank) != labels:
            continue
        w = 1.0
        for t, k in enumerate(seq):
            w *= p[t, k]
        total += w
        for t, k in enumerate(seq):
            post[t, k] += w
    if total <= 0.0:
        raise ValueError("no labelling collapses to the target")
    return -np.log(total), -post / total


# ---------------------------------------------------------------------------
# tree oracles: everything via explicit root paths
# ---------------------------------------------------------------------------

def parent_map(doc):
    """Walk a nested {name, code?, children: [...]} document into flat maps.

    Returns (parents, codes) where parents maps node key -> parent key
    (root maps to None) and codes maps leaf code -> node key.  Node keys are
    tuples of child indices from the root, so they need no cooperation from
    the implementation under test.
    """
    parents = {}
    codes = {}

    def walk(node, key, parent):
        parents[key] = parent
        kids = node.get("children", [])
        if not kids:
            codes[node["code"]] = key
        for i, kid in enumerate(kids):
            walk(kid, key + (i,), key)

    walk(doc, (), None)
    return parents, codes


def root_path(parents, key):
    path = [key]
    while parents[path[-1]] is not None:
        path.append(parents[path[-1]])
    return path[::-1]


def lca_by_paths(parents, a, b):
    pa, pb = root_path(parents, a), root_path(parents, b)
    anc = None
    for x, y in zip(pa, pb):
        if x != y:
            break
        anc = x
    return anc


def depth_by_path(parents, key):
    return len(root_path(parents, key)) - 1


def sim_by_paths(parents, codes, lang, targets):
    return sum(
        depth_by_path(parents, lca_by_paths(parents, codes[lang], codes[t]))
        for t in targets
    )


def select_by_full_sort(parents, codes, targets, candidates, m):
    pool = sorted(set(candidates) - set(targets))
    scored = [(-sim_by_paths(parents, codes, c, targets), c) for c in pool]
    scored.sort()
    return [c for _, c in scored[:m]]


# ---------------------------------------------------------------------------
# edit distance by memoized recursion
# ---------------------------------------------------------------------------

def edit_distance_recursive(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        sub = go(i - 1, j - 1) + (a[i - 1] != b[j - 1])
        return min(sub, go(i - 1, j) + 1, go(i, j - 1) + 1)

    return go(len(a), len(b))


# ---------------------------------------------------------------------------
# matrix product by triple loop (handles one stacked batch axis)
# ---------------------------------------------------------------------------

def naive_matmul(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.ndim == 2 and b.ndim == 2:
        n, k = a.shape
        k2, m = b.shape
        assert k == k2
        out = np.zeros((n, m))
        for i in range(n):
            for j in range(m):
                for t in range(k):
                    out[i, j] += a[i, t] * b[t, j]
        return out
    if a.ndim == 3 and b.ndim == 3:
        return np.stack([naive_matmul(a[i], b[i]) for i in range(a.shape[0])])
    if a.ndim == 3 and b.ndim == 2:
        return np.stack([naive_matmul(a[i], b) for i in range(a.shape[0])])
    raise AssertionError("unsupported ranks for naive_matmul")
