"""Named random streams split from one root seed.

``stream(seed, "sde", update, window)`` always yields the same generator for the
same arguments, independent of what other streams have consumed.
"""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("prior", "sde", "batch", "init", "synth")


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    tag = zlib.crc32(name.encode("utf-8"))
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, tag, *[int(k) for k in keys]]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
