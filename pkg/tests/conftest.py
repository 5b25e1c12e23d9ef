import numpy as np
import pytest

from config import MAX_RESOLUTION_ENV
from dyadic import DyadicInterval


@pytest.fixture(autouse=True)
def default_max_resolution(monkeypatch):
    """Tests run against the built-in resolution ceiling unless they override it"""
    monkeypatch.delenv(MAX_RESOLUTION_ENV, raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_disjoint_collection(rng: np.random.Generator, max_level: int):
    """A nonempty set of pairwise disjoint dyadic intervals with levels ≤ max_level"""
    leaves = []
    stack = [DyadicInterval(0, 0)]
    while stack:
        interval = stack.pop()
        if interval.level < max_level and rng.random() < 0.6:
            stack.extend(interval.split())
        else:
            leaves.append(interval)
    chosen = [leaf for leaf in leaves if rng.random() < 0.5]
    return chosen or [leaves[int(rng.integers(len(leaves)))]]
