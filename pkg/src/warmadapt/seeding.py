"""Stable seed derivation.

Every stochastic step in the toolkit draws from an rng seeded by a hash of
(root seed, purpose tags...). Hashing goes through SHA-256 rather than
Python's builtin hash, which is salted per process and would wreck
reproducibility.
"""

import hashlib


def derive_seed(*parts):
    """Deterministic 63-bit seed from any printable parts."""
    key = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1
