"""Hierarchical seed derivation.

Run seed -> stage seed -> item seed, derived by hashing the parent seed with
string/int labels.  Adding parallelism never changes results because every
work item owns an independently derived seed.
"""

from __future__ import annotations

import hashlib


def derive(seed: int, *labels) -> int:
    """Derive a child seed from a parent seed and a label path, stable across runs."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for lab in labels:
        h.update(b"/")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest(), "big")
