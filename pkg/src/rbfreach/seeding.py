"""Deterministic per-component random streams derived from one root seed.

Every consumer asks for ``derive_rng(root, "name", *indices)``; the name is
hashed to a fixed integer so streams do not depend on call order.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("indicator", "audit", "initial-states", "noise", "policy", "systems", "validate")


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("ascii"))


def derive_rng(root: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for stream ``name`` (and optional integer sub-indices) under ``root``."""
    return np.random.default_rng(np.random.SeedSequence([int(root), stream_key(name),
                                                         *map(int, indices)]))
