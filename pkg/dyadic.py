"""
Dyadic intervals and rectangles of the unit square
Intervals are (level, index) pairs; membership, disjointness and measures are exact
"""

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import FrozenSet, Iterable, List, Optional, Tuple, Union

import numpy as np

from config import MAX_INTERVAL_LEVEL, get_max_resolution
from errors import ConfigError, ResolutionError


@dataclass(frozen=True, order=True)
class DyadicInterval:
    """The interval [index·2^-level, (index+1)·2^-level)"""

    level: int
    index: int

    def __post_init__(self):
        if self.level < 0 or self.index < 0:
            raise ResolutionError(f"Level and index must be nonnegative, got {self.level}:{self.index}")
        if self.index >= 1 << self.level:
            raise ResolutionError(f"Index {self.index} out of range for level {self.level}")

    @property
    def measure(self) -> Fraction:
        return Fraction(1, 1 << self.level)

    @property
    def left(self) -> Fraction:
        return Fraction(self.index, 1 << self.level)

    @property
    def right(self) -> Fraction:
        return Fraction(self.index + 1, 1 << self.level)

    @property
    def position(self) -> int:
        """Position in the canonical order of all dyadic intervals"""
        return (1 << self.level) - 1 + self.index

    def split(self) -> Tuple["DyadicInterval", "DyadicInterval"]:
        """Left half I+ and right half I-"""
        if self.level >= MAX_INTERVAL_LEVEL:
            raise ResolutionError(
                f"Cannot split level-{self.level} interval beyond level {MAX_INTERVAL_LEVEL}",
                {"interval": str(self)},
            )
        return (
            DyadicInterval(self.level + 1, 2 * self.index),
            DyadicInterval(self.level + 1, 2 * self.index + 1),
        )

    @property
    def plus(self) -> "DyadicInterval":
        return self.split()[0]

    @property
    def minus(self) -> "DyadicInterval":
        return self.split()[1]

    def contains(self, other: "DyadicInterval") -> bool:
        """Whether other ⊆ self"""
        if other.level < self.level:
            return False
        return other.index >> (other.level - self.level) == self.index

    def intersects(self, other: "DyadicInterval") -> bool:
        # Dyadic intervals are either nested or disjoint
        return self.contains(other) or other.contains(self)

    def cell_range(self, level: int) -> range:
        """Indices of the level-`level` grid cells covering this interval"""
        if level < self.level:
            raise ResolutionError(f"Grid level {level} is coarser than interval level {self.level}")
        shift = level - self.level
        return range(self.index << shift, (self.index + 1) << shift)

    def cell_mask(self, level: int) -> int:
        """Bitmask of the covering grid cells at the given level"""
        shift = level - self.level
        if shift < 0:
            raise ResolutionError(f"Grid level {level} is coarser than interval level {self.level}")
        return ((1 << (1 << shift)) - 1) << (self.index << shift)

    def __str__(self) -> str:
        return f"{self.level}:{self.index}"

    @classmethod
    def from_str(cls, text: str) -> "DyadicInterval":
        try:
            level, index = text.strip().split(":")
            return cls(int(level), int(index))
        except ValueError:
            raise ConfigError(f"Invalid interval '{text}', expected 'level:index'")


UNIT_INTERVAL = DyadicInterval(0, 0)


@dataclass(frozen=True, order=True)
class DyadicRectangle:
    """The rectangle x × y"""

    x: DyadicInterval
    y: DyadicInterval

    @property
    def measure(self) -> Fraction:
        return self.x.measure * self.y.measure

    def contains(self, other: "DyadicRectangle") -> bool:
        return self.x.contains(other.x) and self.y.contains(other.y)

    def intersects(self, other: "DyadicRectangle") -> bool:
        return self.x.intersects(other.x) and self.y.intersects(other.y)

    def __str__(self) -> str:
        return f"{self.x},{self.y}"

    @classmethod
    def from_str(cls, text: str) -> "DyadicRectangle":
        parts = text.strip().split(",")
        if len(parts) != 2:
            raise ConfigError(f"Invalid rectangle '{text}', expected 'n:k,m:j'")
        return cls(DyadicInterval.from_str(parts[0]), DyadicInterval.from_str(parts[1]))


UNIT_SQUARE = DyadicRectangle(UNIT_INTERVAL, UNIT_INTERVAL)


def measure(obj: Union[DyadicInterval, DyadicRectangle]) -> Fraction:
    """Exact Lebesgue measure as a dyadic rational"""
    return obj.measure


def dimension(resolution: int) -> int:
    """d_N = 2^(N+1) - 1, the number of intervals in 𝒟_{≤N}"""
    return (1 << (resolution + 1)) - 1


def check_resolution(resolution: int, max_resolution: Optional[int] = None) -> int:
    ceiling = get_max_resolution() if max_resolution is None else max_resolution
    if resolution < 0:
        raise ResolutionError(f"Resolution must be nonnegative, got {resolution}")
    if resolution > ceiling:
        raise ResolutionError(
            f"Resolution {resolution} exceeds the configured maximum {ceiling}",
            {"resolution": resolution, "max_resolution": ceiling},
        )
    return resolution


def intervals_at_level(level: int) -> List[DyadicInterval]:
    return [DyadicInterval(level, k) for k in range(1 << level)]


@lru_cache(maxsize=None)
def intervals_up_to(resolution: int) -> Tuple[DyadicInterval, ...]:
    """𝒟_{≤N} in canonical order (level, index)"""
    return tuple(DyadicInterval(level, k) for level in range(resolution + 1) for k in range(1 << level))


def interval_at_position(position: int) -> DyadicInterval:
    level = (position + 1).bit_length() - 1
    return DyadicInterval(level, position + 1 - (1 << level))


def tensor(xs: Iterable[DyadicInterval], ys: Iterable[DyadicInterval]) -> FrozenSet[DyadicRectangle]:
    """{I × J : I ∈ A, J ∈ B}"""
    ys = list(ys)
    return frozenset(DyadicRectangle(x, y) for x in xs for y in ys)


@dataclass(frozen=True)
class BasisEnumeration:
    """All rectangles of 𝒟_{≤N}⊗𝒟_{≤N} in canonical order"""

    resolution: int
    order: Tuple[DyadicRectangle, ...]

    def __len__(self) -> int:
        return len(self.order)

    def __iter__(self):
        return iter(self.order)

    def __getitem__(self, position: int) -> DyadicRectangle:
        return self.order[position]

    @property
    def side(self) -> int:
        return dimension(self.resolution)

    def position(self, rect: DyadicRectangle) -> int:
        """Row/column index of a rectangle; valid for any rectangle inside the basis"""
        if rect.x.level > self.resolution or rect.y.level > self.resolution:
            raise ResolutionError(f"Rectangle {rect} is not in the resolution-{self.resolution} basis")
        return rect.x.position * self.side + rect.y.position


@lru_cache(maxsize=None)
def _enumeration(resolution: int) -> BasisEnumeration:
    intervals = intervals_up_to(resolution)
    order = tuple(DyadicRectangle(x, y) for x in intervals for y in intervals)
    return BasisEnumeration(resolution=resolution, order=order)


def enumerate_basis(resolution: int, max_resolution: Optional[int] = None) -> BasisEnumeration:
    """Canonical enumeration of 𝒟_{≤N}⊗𝒟_{≤N}"""
    check_resolution(resolution, max_resolution)
    return _enumeration(resolution)


@lru_cache(maxsize=None)
def _rectangle_measures(resolution: int) -> np.ndarray:
    interval_measures = np.array([2.0 ** -I.level for I in intervals_up_to(resolution)])
    values = np.outer(interval_measures, interval_measures).ravel()
    values.setflags(write=False)
    return values


def rectangle_measures(resolution: int) -> np.ndarray:
    """|Q| for every Q in canonical order, as exact float dyadics"""
    return _rectangle_measures(resolution)
