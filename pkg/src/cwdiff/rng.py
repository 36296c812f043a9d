"""Named random streams derived from one root seed.

Every consumer asks for a stream by label, so adding a new consumer never
shifts the numbers another one sees.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, label: str) -> np.random.Generator:
    """Generator for ``label`` under root ``seed`` (sha256 of ``"seed:label"``)."""
    return np.random.Generator(np.random.PCG64(stream_seed(seed, label)))


def child(rng: np.random.Generator, label: str) -> np.random.Generator:
    """Derive a labelled child stream from an existing generator without consuming it."""
    key = int(rng.bit_generator.state["state"]["state"]) & ((1 << 63) - 1)
    return stream(key, label)
