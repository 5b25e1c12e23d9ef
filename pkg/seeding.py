"""
Seed derivation for reproducible experiments
Every random stream is named by a path under one top-level seed, e.g. "search/attempt/17"
"""

import hashlib

import numpy as np


def derive_seed(seed: int, path: str) -> int:
    """Hash a (seed, path) pair into a 128-bit integer using SHA-256"""
    combined = f"{int(seed)}/{path}"
    digest = hashlib.sha256(combined.encode()).hexdigest()
    return int(digest[:32], 16)


def derive_rng(seed: int, path: str) -> np.random.Generator:
    """Independent generator for the stream named by path"""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, path)))


def rademacher(rng: np.random.Generator, size) -> np.ndarray:
    """Uniform ±1 signs as int8"""
    return (2 * rng.integers(0, 2, size=size, dtype=np.int8) - 1).astype(np.int8)
