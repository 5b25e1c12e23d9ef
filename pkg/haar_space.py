"""
Finite-dimensional mixed-norm Hardy spaces H_N^p(H_N^q)
Elements are Haar-coefficient vectors in canonical rectangle order
"""

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from typing import Any, Dict, Iterable, Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from dyadic import (
    DyadicInterval,
    DyadicRectangle,
    dimension,
    enumerate_basis,
    intervals_up_to,
    rectangle_measures,
)
from errors import ConfigError, DimensionMismatchError, DisjointnessError, ResolutionError
from seeding import derive_rng


class Side(str, Enum):
    PRIMAL = "primal"
    DUAL = "dual"


class ExponentPair(BaseModel):
    """Exponents 1 ≤ p, q < ∞ and their conjugates (p′ = ∞ exactly when p = 1)"""

    model_config = ConfigDict(frozen=True)

    p: float = Field(2.0, ge=1.0, description="Outer (x) integrability exponent")
    q: float = Field(2.0, ge=1.0, description="Inner (y) integrability exponent")

    @field_validator("p", "q")
    @classmethod
    def finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("exponents must be finite")
        return value

    @property
    def p_dual(self) -> float:
        return math.inf if self.p == 1 else self.p / (self.p - 1)

    @property
    def q_dual(self) -> float:
        return math.inf if self.q == 1 else self.q / (self.q - 1)

    @property
    def inv_p_dual(self) -> float:
        """1/p′, which is 0 when p′ = ∞"""
        return 1.0 - 1.0 / self.p

    @property
    def inv_q_dual(self) -> float:
        return 1.0 - 1.0 / self.q

    @property
    def is_euclidean(self) -> bool:
        return self.p == 2 and self.q == 2

    def __str__(self) -> str:
        return f"(p={self.p:g}, q={self.q:g})"


EUCLIDEAN = ExponentPair(p=2.0, q=2.0)


class SpaceDescriptor(BaseModel):
    """H_N^p(H_N^q) (primal) or its dual"""

    model_config = ConfigDict(frozen=True)

    resolution: int = Field(..., ge=0, description="Resolution N of the Haar basis")
    exponents: ExponentPair = Field(default_factory=ExponentPair, description="Exponent pair (p, q)")
    side: Side = Field(default=Side.PRIMAL, description="Primal space or its dual")

    @property
    def dim(self) -> int:
        return dimension(self.resolution) ** 2

    def toggled(self) -> "SpaceDescriptor":
        side = Side.DUAL if self.side == Side.PRIMAL else Side.PRIMAL
        return self.model_copy(update={"side": side})


@dataclass(frozen=True, eq=False)
class HardyElement:
    """f = Σ_R a_R h_R over 𝒟_{≤N}⊗𝒟_{≤N}"""

    resolution: int
    coefficients: np.ndarray

    def __post_init__(self):
        coefficients = np.array(self.coefficients, dtype=np.float64).ravel()
        expected = dimension(self.resolution) ** 2
        if coefficients.shape[0] != expected:
            raise DimensionMismatchError(
                f"Expected {expected} coefficients at resolution {self.resolution}, got {coefficients.shape[0]}"
            )
        coefficients.setflags(write=False)
        object.__setattr__(self, "coefficients", coefficients)

    @classmethod
    def zero(cls, resolution: int) -> "HardyElement":
        return cls(resolution, np.zeros(dimension(resolution) ** 2))

    @classmethod
    def basis_vector(cls, rect: DyadicRectangle, resolution: int) -> "HardyElement":
        coefficients = np.zeros(dimension(resolution) ** 2)
        coefficients[enumerate_basis(resolution).position(rect)] = 1.0
        return cls(resolution, coefficients)

    @classmethod
    def from_terms(cls, terms: Mapping[DyadicRectangle, float], resolution: int) -> "HardyElement":
        basis = enumerate_basis(resolution)
        coefficients = np.zeros(len(basis))
        for rect, value in terms.items():
            coefficients[basis.position(rect)] += value
        return cls(resolution, coefficients)

    def coefficient(self, rect: DyadicRectangle) -> float:
        return float(self.coefficients[enumerate_basis(self.resolution).position(rect)])

    def as_matrix(self) -> np.ndarray:
        """Coefficients arranged as a d_N × d_N matrix indexed by (x-interval, y-interval)"""
        side = dimension(self.resolution)
        return self.coefficients.reshape(side, side)

    def is_zero(self) -> bool:
        return not np.any(self.coefficients)

    def _check(self, other: "HardyElement"):
        if self.resolution != other.resolution:
            raise DimensionMismatchError(
                f"Resolution mismatch: {self.resolution} vs {other.resolution}"
            )

    def __add__(self, other: "HardyElement") -> "HardyElement":
        self._check(other)
        return HardyElement(self.resolution, self.coefficients + other.coefficients)

    def __sub__(self, other: "HardyElement") -> "HardyElement":
        self._check(other)
        return HardyElement(self.resolution, self.coefficients - other.coefficients)

    def __mul__(self, scalar: float) -> "HardyElement":
        return HardyElement(self.resolution, self.coefficients * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> "HardyElement":
        return HardyElement(self.resolution, -self.coefficients)

    def to_dict(self) -> Dict[str, Any]:
        return {"resolution": self.resolution, "coefficients": self.coefficients.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "HardyElement":
        try:
            return cls(int(data["resolution"]), np.asarray(data["coefficients"], dtype=np.float64))
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise ConfigError(f"Malformed element: {str(e)}")


def block_function(
    xs: Iterable[DyadicInterval],
    ys: Iterable[DyadicInterval],
    resolution: int,
    theta: Optional[Mapping[DyadicInterval, int]] = None,
    eps: Optional[Mapping[DyadicInterval, int]] = None,
) -> HardyElement:
    """Σ_{K∈X, L∈Y} θ_K ε_L h_{K×L}"""
    ys = list(ys)
    terms = {}
    for K in xs:
        for L in ys:
            sign = (theta or {}).get(K, 1) * (eps or {}).get(L, 1)
            terms[DyadicRectangle(K, L)] = float(sign)
    return HardyElement.from_terms(terms, resolution)


# ==================== POINT EVALUATION ====================

def _haar_factor(interval: DyadicInterval, cell: DyadicInterval) -> int:
    if not interval.contains(cell):
        return 0
    shift = cell.level - interval.level - 1
    return 1 if (cell.index >> shift) & 1 == 0 else -1


def haar_eval(rect: DyadicRectangle, cell: DyadicRectangle) -> int:
    """h_{R.x}(x)·h_{R.y}(y) on a grid cell"""
    if cell.x.level != cell.y.level:
        raise ResolutionError(f"Grid cell {cell} must be square")
    needed = max(rect.x.level, rect.y.level) + 1
    if cell.x.level < needed:
        raise ResolutionError(
            f"Cell resolution {cell.x.level} too coarse for {rect}; need at least {needed}"
        )
    return _haar_factor(rect.x, cell.x) * _haar_factor(rect.y, cell.y)


@lru_cache(maxsize=None)
def _cell_incidence(resolution: int) -> np.ndarray:
    """inc[c, pos(I)] = 1 when the level-N cell c lies in I"""
    inc = np.zeros((1 << resolution, dimension(resolution)))
    for I in intervals_up_to(resolution):
        inc[I.cell_range(resolution).start:I.cell_range(resolution).stop, I.position] = 1.0
    inc.setflags(write=False)
    return inc


@lru_cache(maxsize=None)
def _signed_incidence(resolution: int) -> np.ndarray:
    """h_I on the level-(N+1) cells"""
    fine = resolution + 1
    signs = np.zeros((1 << fine, dimension(resolution)))
    for I in intervals_up_to(resolution):
        plus, minus = I.split()
        signs[plus.cell_range(fine).start:plus.cell_range(fine).stop, I.position] = 1.0
        signs[minus.cell_range(fine).start:minus.cell_range(fine).stop, I.position] = -1.0
    signs.setflags(write=False)
    return signs


def grid_values(f: HardyElement) -> np.ndarray:
    """Values of f on the 2^(N+1) × 2^(N+1) grid, rows indexed by x"""
    signs = _signed_incidence(f.resolution)
    return signs @ f.as_matrix() @ signs.T


def quadrature_inner(f: HardyElement, g: HardyElement) -> float:
    f._check(g)
    cell_area = 4.0 ** -(f.resolution + 1)
    return float(np.sum(grid_values(f) * grid_values(g)) * cell_area)


# ==================== NORMS AND PAIRINGS ====================

def square_function(f: HardyElement) -> np.ndarray:
    """S²(x,y) = Σ a_R² χ_R(x,y) on the 2^N × 2^N grid"""
    inc = _cell_incidence(f.resolution)
    return inc @ (f.as_matrix() ** 2) @ inc.T


def _norm_from_square(square: np.ndarray, exponents: ExponentPair, resolution: int) -> np.ndarray:
    # square has shape (..., 2^N, 2^N); the last axis is y
    cell = 2.0 ** -resolution
    inner = np.sum(square ** (exponents.q / 2.0), axis=-1) * cell
    outer = np.sum(inner ** (exponents.p / exponents.q), axis=-1) * cell
    return outer ** (1.0 / exponents.p)


def mixed_norm(f: HardyElement, exponents: ExponentPair) -> float:
    """(∫(∫ S²^{q/2} dy)^{p/q} dx)^{1/p}"""
    return float(_norm_from_square(square_function(f), exponents, f.resolution))


def mixed_norms(batch: np.ndarray, resolution: int, exponents: ExponentPair) -> np.ndarray:
    """Norms of a stack of coefficient vectors of shape (k, d_N²)"""
    side = dimension(resolution)
    batch = np.asarray(batch, dtype=np.float64).reshape(-1, side, side)
    inc = _cell_incidence(resolution)
    square = inc @ (batch ** 2) @ inc.T
    return _norm_from_square(square, exponents, resolution)


def haar_norm(rect: DyadicRectangle, exponents: ExponentPair) -> float:
    """‖h_R‖ = |R.x|^{1/p}|R.y|^{1/q}"""
    return float(rect.x.measure) ** (1.0 / exponents.p) * float(rect.y.measure) ** (1.0 / exponents.q)


def haar_norms(resolution: int, exponents: ExponentPair) -> np.ndarray:
    """‖h_Q‖ for every Q in canonical order"""
    levels = np.array([I.level for I in intervals_up_to(resolution)], dtype=np.float64)
    x = (2.0 ** -levels) ** (1.0 / exponents.p)
    y = (2.0 ** -levels) ** (1.0 / exponents.q)
    return np.outer(x, y).ravel()


def l2_inner(f: HardyElement, g: HardyElement) -> float:
    """⟨f, g⟩ = Σ_R a_R b_R |R|"""
    f._check(g)
    return float(np.dot(f.coefficients * g.coefficients, rectangle_measures(f.resolution)))


def _collection_measure(intervals: Iterable[DyadicInterval], label: str) -> Fraction:
    ordered = sorted(intervals, key=lambda I: I.left)
    if not ordered:
        raise ConfigError(f"Collection {label} must be nonempty")
    for first, second in zip(ordered, ordered[1:]):
        if first.right > second.left:
            raise DisjointnessError(
                f"Collection {label} is not pairwise disjoint",
                {"witness": [str(first), str(second)]},
            )
    return sum((I.measure for I in ordered), Fraction(0))


def block_norm_closed_form(
    xs: Iterable[DyadicInterval],
    ys: Iterable[DyadicInterval],
    exponents: ExponentPair,
    side: Side = Side.PRIMAL,
) -> float:
    """|X|^{1/p}|Y|^{1/q} (primal) or |X|^{1/p′}|Y|^{1/q′} (dual), independent of signs"""
    mx = float(_collection_measure(xs, "X"))
    my = float(_collection_measure(ys, "Y"))
    if side == Side.PRIMAL:
        return mx ** (1.0 / exponents.p) * my ** (1.0 / exponents.q)
    return mx ** exponents.inv_p_dual * my ** exponents.inv_q_dual


def _dual_candidate(f: HardyElement, rng: np.random.Generator) -> np.ndarray:
    dim = f.coefficients.shape[0]
    support = np.flatnonzero(f.coefficients)
    candidate = np.zeros(dim)
    size = int(rng.integers(1, min(dim, 8) + 1))
    if support.size and rng.random() < 0.5:
        # Perturbed restriction of f to part of its support
        chosen = rng.choice(support, size=min(size, support.size), replace=False)
        scale = np.abs(f.coefficients[chosen]) ** rng.uniform(0.0, 2.0)
        candidate[chosen] = np.sign(f.coefficients[chosen]) * scale
    else:
        chosen = rng.choice(dim, size=size, replace=False)
        candidate[chosen] = rng.standard_normal(size)
    return candidate


def dual_norm_lower_bound(f: HardyElement, exponents: ExponentPair, trials: int, seed: int) -> float:
    """max over candidates h of |⟨f,h⟩| / ‖h‖, a certified lower bound for ‖f‖_*"""
    if trials < 1:
        raise ConfigError(f"trials must be at least 1, got {trials}")
    if f.is_zero():
        return 0.0
    candidates = [f.coefficients, np.sign(f.coefficients)]
    for k in range(trials):
        candidates.append(_dual_candidate(f, derive_rng(seed, f"dual/candidate/{k}")))
    batch = np.vstack(candidates)
    norms = mixed_norms(batch, f.resolution, exponents)
    pairings = np.abs(batch @ (f.coefficients * rectangle_measures(f.resolution)))
    valid = norms > 0
    # h = f first, so the block self-pairing value is exact
    best = float(pairings[0] / norms[0])
    if np.any(valid[1:]):
        best = max(best, float(np.max(pairings[1:][valid[1:]] / norms[1:][valid[1:]])))
    return best
