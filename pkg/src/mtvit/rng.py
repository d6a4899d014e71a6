"""Deterministic randomness.

All randomness in the package flows through counter-based Philox streams
keyed by (seed, purpose-tag, index). Streams are independent of each other
and of evaluation order, so data workers can be reordered or parallelised
without changing a single sample.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_int(tag: str) -> int:
    """Stable 64-bit integer for a purpose tag (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(seed: int, *tags: str | int) -> int:
    """Derive a stable 63-bit sub-seed from a master seed and tag chain."""
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(16, "little", signed=True))
    for t in tags:
        if isinstance(t, str):
            h.update(b"s" + t.encode("utf-8") + b"\x00")
        else:
            h.update(b"i" + int(t).to_bytes(16, "little", signed=True))
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)


def stream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Counter-based generator for the (seed, tag, index) key."""
    key = np.random.SeedSequence([int(seed) & (2**63 - 1), _tag_int(tag), int(index)])
    return np.random.Generator(np.random.Philox(key))
