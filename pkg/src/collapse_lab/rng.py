"""Labelled random streams.

Every stream is a Philox-4x64 counter-based generator whose 128-bit key is
``blake2b(seed, label)``.  Streams with different labels never share state,
and the bits do not depend on platform, thread count, or call order between
streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

WEIGHTS = "weights"
SYMBOLS = "symbols"
NOISE = "noise"
DATA = "data"


def stream_key(seed: int, label: str) -> int:
    h = hashlib.blake2b(f"{int(seed)}/{label}".encode(), digest_size=16)
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, label)))
