"""Deterministic seed derivation.

All randomness in the pipeline flows from one root seed through named
derivations, so any two runs with the same root seed are byte-identical
regardless of worker count or evaluation order.
"""

from __future__ import annotations

import hashlib


def derive_seed(root: int, *parts: object) -> int:
    """Derive a 63-bit child seed from a root seed and a label path."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode("utf-8"))
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "big") >> 1
