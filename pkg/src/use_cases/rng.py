"""Deterministic random streams.

Every random draw in tabenc comes from a stream keyed by (master seed, purpose tag,
index). The key is a keyed BLAKE2b digest fed to numpy's Philox counter-based
generator, so streams are reproducible across runs and platforms and do not depend
on the order in which tasks are scheduled.
"""
import hashlib

import numpy as np

from src.domain.models import Seed


def stream_key(seed: Seed, tag: str, index: int) -> np.ndarray:
    """128-bit Philox key for one (tag, index) stream, as two little-endian uint64 words."""
    digest = hashlib.blake2b(
        f"{tag}\x1f{index}".encode("utf-8"),
        key=seed.master.to_bytes(8, "little"),
        digest_size=16,
    ).digest()
    return np.frombuffer(digest, dtype="<u8").astype(np.uint64)


def derive_rng(seed: Seed, tag: str, index: int) -> np.random.Generator:
    """Independent generator for one purpose and example index."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, tag, index)))
