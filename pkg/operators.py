"""
Operators on V_N stored as Gram matrices in the Haar basis
gram[Q′, Q] = ⟨T h_Q, h_Q′⟩; the coefficient action is gram / |Q′| row by row
"""

import json
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy import linalg

from config import BASIS_ORDER, GRAM_MAGIC, GRAM_VERSION, NORM_TOLERANCE
from dyadic import (
    DyadicInterval,
    DyadicRectangle,
    dimension,
    enumerate_basis,
    intervals_up_to,
    rectangle_measures,
)
from errors import (
    ConfigError,
    DegenerateDiagonalError,
    DimensionMismatchError,
    GenerationError,
)
from haar_space import (
    EUCLIDEAN,
    ExponentPair,
    HardyElement,
    Side,
    SpaceDescriptor,
    haar_norms,
    mixed_norms,
)
from seeding import derive_rng

logger = logging.getLogger(__name__)

GRAM_HEADER = struct.Struct("<4sIII")
SIDE_CODES = {Side.PRIMAL: 0, Side.DUAL: 1}


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """A linear map between Haar spaces, kept as its bilinear form on basis pairs"""

    domain: SpaceDescriptor
    codomain: SpaceDescriptor
    gram: np.ndarray

    def __post_init__(self):
        gram = np.array(self.gram, dtype=np.float64)
        expected = (self.codomain.dim, self.domain.dim)
        if gram.shape != expected:
            raise DimensionMismatchError(
                f"Gram matrix has shape {gram.shape}, expected {expected}",
                {"codomain": self.codomain.resolution, "domain": self.domain.resolution},
            )
        gram.setflags(write=False)
        object.__setattr__(self, "gram", gram)

    @property
    def is_square(self) -> bool:
        return self.domain.resolution == self.codomain.resolution

    @property
    def action(self) -> np.ndarray:
        """Coefficient-action matrix C with (Tf)_Q′ = Σ_Q C[Q′,Q] a_Q"""
        return self.gram / rectangle_measures(self.codomain.resolution)[:, None]

    @classmethod
    def from_action(
        cls, action: np.ndarray, domain: SpaceDescriptor, codomain: SpaceDescriptor
    ) -> "OperatorMatrix":
        action = np.asarray(action, dtype=np.float64)
        return cls(domain, codomain, action * rectangle_measures(codomain.resolution)[:, None])

    @classmethod
    def identity(cls, resolution: int, exponents: ExponentPair = EUCLIDEAN) -> "OperatorMatrix":
        space = SpaceDescriptor(resolution=resolution, exponents=exponents)
        return cls(space, space, np.diag(rectangle_measures(resolution)))

    @classmethod
    def zero(cls, resolution: int, exponents: ExponentPair = EUCLIDEAN) -> "OperatorMatrix":
        space = SpaceDescriptor(resolution=resolution, exponents=exponents)
        return cls(space, space, np.zeros((space.dim, space.dim)))

    @classmethod
    def diagonal_multiplier(
        cls, multipliers: np.ndarray, resolution: int, exponents: ExponentPair = EUCLIDEAN
    ) -> "OperatorMatrix":
        """h_Q ↦ m_Q h_Q"""
        space = SpaceDescriptor(resolution=resolution, exponents=exponents)
        multipliers = np.asarray(multipliers, dtype=np.float64)
        return cls(space, space, np.diag(multipliers * rectangle_measures(resolution)))

    def compose(self, other: "OperatorMatrix") -> "OperatorMatrix":
        """self ∘ other"""
        if other.codomain.resolution != self.domain.resolution:
            raise DimensionMismatchError(
                f"Cannot compose: inner codomain N={other.codomain.resolution}, "
                f"outer domain N={self.domain.resolution}"
            )
        return OperatorMatrix.from_action(self.action @ other.action, other.domain, self.codomain)

    def __matmul__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        return self.compose(other)

    def scaled(self, factor: float) -> "OperatorMatrix":
        return OperatorMatrix(self.domain, self.codomain, self.gram * float(factor))

    def adjoint(self) -> "OperatorMatrix":
        """Banach adjoint for the L² pairing: ⟨T*g, f⟩ = ⟨g, Tf⟩"""
        return OperatorMatrix(self.codomain.toggled(), self.domain.toggled(), self.gram.T)

    def with_exponents(self, exponents: ExponentPair) -> "OperatorMatrix":
        return OperatorMatrix(
            self.domain.model_copy(update={"exponents": exponents}),
            self.codomain.model_copy(update={"exponents": exponents}),
            self.gram,
        )

    def is_diagonal(self) -> bool:
        if not self.is_square:
            return False
        return not np.any(self.gram - np.diag(np.diag(self.gram)))

    # ==================== SERIALIZATION ====================

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "operator",
            "order": BASIS_ORDER,
            "domain": self.domain.model_dump(mode="json"),
            "codomain": self.codomain.model_dump(mode="json"),
            "gram": self.gram.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OperatorMatrix":
        try:
            if data.get("order", BASIS_ORDER) != BASIS_ORDER:
                raise ConfigError(f"Unsupported basis order '{data.get('order')}'")
            return cls(
                SpaceDescriptor.model_validate(data["domain"]),
                SpaceDescriptor.model_validate(data["codomain"]),
                np.asarray(data["gram"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"Malformed operator: {str(e)}")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_bytes(self) -> bytes:
        """Little-endian float64 dump behind a {magic, version, N, side} header; side 0 is primal, 1 dual"""
        if not self.is_square:
            raise ConfigError("Binary Gram dumps are defined for square operators only")
        if self.domain.side != self.codomain.side:
            raise ConfigError("Binary Gram dumps need domain and codomain on the same side")
        header = GRAM_HEADER.pack(
            GRAM_MAGIC, GRAM_VERSION, self.domain.resolution, SIDE_CODES[self.domain.side]
        )
        return header + self.gram.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, payload: bytes, exponents: ExponentPair = EUCLIDEAN) -> "OperatorMatrix":
        if len(payload) < GRAM_HEADER.size:
            raise ConfigError("Binary Gram dump is shorter than its header")
        magic, version, resolution, code = GRAM_HEADER.unpack_from(payload)
        if magic != GRAM_MAGIC:
            raise ConfigError(f"Bad magic {magic!r} in Gram dump")
        if version != GRAM_VERSION:
            raise ConfigError(f"Unsupported Gram dump version {version}")
        sides = {value: side for side, value in SIDE_CODES.items()}
        if code not in sides:
            raise ConfigError(f"Unknown side code {code} in Gram dump")
        dim = dimension(resolution) ** 2
        body = payload[GRAM_HEADER.size:]
        if len(body) != dim * dim * 8:
            raise ConfigError(f"Gram dump body has {len(body)} bytes, expected {dim * dim * 8}")
        gram = np.frombuffer(body, dtype="<f8").reshape(dim, dim)
        space = SpaceDescriptor(resolution=resolution, exponents=exponents, side=sides[code])
        return cls(space, space, gram)


def apply(T: OperatorMatrix, f: HardyElement) -> HardyElement:
    if f.resolution != T.domain.resolution:
        raise DimensionMismatchError(
            f"Operator acts on N={T.domain.resolution}, element has N={f.resolution}"
        )
    return HardyElement(T.codomain.resolution, T.action @ f.coefficients)


# ==================== DIAGONAL ANALYSIS ====================

def _require_square(T: OperatorMatrix):
    if not T.is_square:
        raise DimensionMismatchError(
            f"Operator must be square, got N={T.domain.resolution} → N={T.codomain.resolution}"
        )


def diagonal(T: OperatorMatrix) -> Dict[DyadicRectangle, float]:
    """⟨T h_Q, h_Q⟩ for every Q"""
    _require_square(T)
    values = np.diag(T.gram)
    return {rect: float(v) for rect, v in zip(enumerate_basis(T.domain.resolution), values)}


def diagonal_multipliers(T: OperatorMatrix) -> np.ndarray:
    """⟨T h_Q, h_Q⟩/|Q| in canonical order"""
    _require_square(T)
    return np.diag(T.gram) / rectangle_measures(T.domain.resolution)


class DiagonalCheck(BaseModel):
    holds: bool
    delta: float
    worst: str = Field(..., description="Rectangle minimizing |⟨T h_Q, h_Q⟩|/|Q|")
    worst_ratio: float


def has_large_diagonal(T: OperatorMatrix, delta: float) -> DiagonalCheck:
    """Whether |⟨T h_Q, h_Q⟩| ≥ δ|Q| for all Q, with the minimizing Q"""
    ratios = np.abs(diagonal_multipliers(T))
    k = int(np.argmin(ratios))
    worst = enumerate_basis(T.domain.resolution)[k]
    return DiagonalCheck(
        holds=bool(np.all(ratios >= delta)),
        delta=delta,
        worst=str(worst),
        worst_ratio=float(ratios[k]),
    )


def multiplication_M(T: OperatorMatrix) -> OperatorMatrix:
    """h_Q ↦ sign(⟨T h_Q, h_Q⟩) h_Q"""
    values = diagonal_multipliers(T)
    zeros = np.flatnonzero(values == 0)
    if zeros.size:
        basis = enumerate_basis(T.domain.resolution)
        raise DegenerateDiagonalError(
            f"{zeros.size} zero diagonal entr{'y' if zeros.size == 1 else 'ies'}; sign undefined",
            {"rectangles": [str(basis[k]) for k in zeros[:20]]},
        )
    return OperatorMatrix.diagonal_multiplier(np.sign(values), T.domain.resolution, T.domain.exponents)


# ==================== NORMS ====================

class NormMethod(str, Enum):
    SPECTRAL = "spectral-p2q2"
    SAMPLED = "sampled"
    TRIANGLE = "triangle-bound"
    DIAGONAL = "diagonal-multiplier"


class NormEstimate(BaseModel):
    lower: float = Field(..., ge=0, description="Attained by the witness")
    upper: Optional[float] = Field(None, description="Certified upper bound, when available")
    method: NormMethod
    exponents: ExponentPair
    witness: str = Field("", description="Description of the vector attaining the lower bound")

    @model_validator(mode="after")
    def ordered(self) -> "NormEstimate":
        if self.upper is not None and self.lower > self.upper * (1 + NORM_TOLERANCE) + NORM_TOLERANCE:
            raise ValueError(f"lower {self.lower} exceeds upper {self.upper}")
        return self


def spectral_norm(T: OperatorMatrix) -> float:
    """Exact p=q=2 norm: ‖D_cod^{1/2} C D_dom^{-1/2}‖₂"""
    cod = np.sqrt(rectangle_measures(T.codomain.resolution))
    dom = np.sqrt(rectangle_measures(T.domain.resolution))
    weighted = cod[:, None] * T.action / dom[None, :]
    if not weighted.size:
        return 0.0
    return float(linalg.norm(weighted, 2))


def _column_norms(T: OperatorMatrix, exponents: ExponentPair, chunk: int = 512) -> np.ndarray:
    action = T.action
    norms = np.empty(action.shape[1])
    for start in range(0, action.shape[1], chunk):
        block = action[:, start:start + chunk].T
        norms[start:start + chunk] = mixed_norms(block, T.codomain.resolution, exponents)
    return norms


def triangle_bound(T: OperatorMatrix, exponents: ExponentPair) -> float:
    """Σ_Q ‖T h_Q‖/‖h_Q‖, an upper bound for ‖T‖ in any exponent pair"""
    return float(np.sum(_column_norms(T, exponents) / haar_norms(T.domain.resolution, exponents)))


def certified_norm_upper(T: OperatorMatrix, exponents: ExponentPair) -> float:
    if exponents.is_euclidean:
        return spectral_norm(T)
    if T.is_diagonal():
        # The Haar system is 1-unconditional in H^p(H^q)
        return float(np.max(np.abs(diagonal_multipliers(T)), initial=0.0))
    return triangle_bound(T, exponents)


def _sampled_lower(T: OperatorMatrix, exponents: ExponentPair, samples: int, seed: int):
    dim = T.domain.dim
    resolution = T.domain.resolution
    # Coordinate candidates: ‖T h_Q‖/‖h_Q‖
    coord = _column_norms(T, exponents) / haar_norms(resolution, exponents)
    best_index = int(np.argmax(coord)) if coord.size else 0
    best = float(coord[best_index]) if coord.size else 0.0
    witness = f"h_{enumerate_basis(resolution)[best_index]}" if coord.size else ""
    candidates = []
    for k in range(samples):
        rng = derive_rng(seed, f"norm/candidate/{k}")
        if k % 2 == 0:
            candidates.append(rng.standard_normal(dim))
        else:
            # Sparse signed blocks
            vector = np.zeros(dim)
            chosen = rng.choice(dim, size=int(rng.integers(1, min(dim, 16) + 1)), replace=False)
            vector[chosen] = rng.choice([-1.0, 1.0], size=chosen.size)
            candidates.append(vector)
    if candidates:
        batch = np.vstack(candidates)
        inputs = mixed_norms(batch, resolution, exponents)
        outputs = mixed_norms(batch @ T.action.T, T.codomain.resolution, exponents)
        ratios = np.where(inputs > 0, outputs / np.where(inputs > 0, inputs, 1.0), 0.0)
        k = int(np.argmax(ratios))
        if ratios[k] > best:
            best, witness = float(ratios[k]), f"norm/candidate/{k}"
    return best, witness


def norm_estimate(
    T: OperatorMatrix, exponents: Optional[ExponentPair] = None, samples: int = 200, seed: int = 0
) -> NormEstimate:
    """Two-sided estimate of ‖T‖ in the given exponent pair"""
    exponents = exponents or T.domain.exponents
    if exponents.is_euclidean:
        value = spectral_norm(T)
        return NormEstimate(lower=value, upper=value, method=NormMethod.SPECTRAL,
                            exponents=exponents, witness="top singular vector")
    if T.is_diagonal():
        multipliers = np.abs(diagonal_multipliers(T))
        k = int(np.argmax(multipliers))
        value = float(multipliers[k])
        return NormEstimate(lower=value, upper=value, method=NormMethod.DIAGONAL,
                            exponents=exponents, witness=f"h_{enumerate_basis(T.domain.resolution)[k]}")
    lower, witness = _sampled_lower(T, exponents, samples, seed)
    upper = triangle_bound(T, exponents)
    return NormEstimate(lower=lower, upper=max(upper, lower), method=NormMethod.SAMPLED,
                        exponents=exponents, witness=witness)


# ==================== TEST OPERATORS ====================

class OperatorStructure(str, Enum):
    DIAGONAL = "diagonal"
    NOISE = "diagonal-plus-noise"
    PERMUTED = "permuted-blocks"


def subtree_swap(resolution: int, rng: np.random.Generator) -> np.ndarray:
    """
    Random automorphism of the dyadic tree 𝒟_{≤N} as a position permutation

    Every interval swaps its two child subtrees with probability 1/2; the root always
    swaps once N ≥ 1. Levels, and so measures, are preserved and each dyadic block
    {K ⊆ I} is carried onto the block under the image of I.
    """
    flips = rng.integers(0, 2, size=dimension(resolution))
    flips[0] = 1
    perm = np.empty(dimension(resolution), dtype=np.int64)
    for I in intervals_up_to(resolution):
        index = 0
        for depth in range(I.level):
            ancestor = DyadicInterval(depth, I.index >> (I.level - depth))
            bit = (I.index >> (I.level - depth - 1)) & 1
            index = 2 * index + (bit ^ int(flips[ancestor.position]))
        perm[I.position] = DyadicInterval(I.level, index).position
    return perm


def _coupling(resolution: int, structure: OperatorStructure, rng: np.random.Generator) -> np.ndarray:
    dim = dimension(resolution) ** 2
    if structure == OperatorStructure.NOISE:
        coupling = rng.standard_normal((dim, dim))
    else:
        side = dimension(resolution)
        px, py = subtree_swap(resolution, rng), subtree_swap(resolution, rng)
        target = (px[:, None] * side + py[None, :]).ravel()
        coupling = np.zeros((dim, dim))
        coupling[target, np.arange(dim)] = rng.standard_normal(dim)
    np.fill_diagonal(coupling, 0.0)
    return coupling


def generate_test_operator(
    resolution: int,
    delta: float,
    gamma: float,
    exponents: ExponentPair = EUCLIDEAN,
    structure: OperatorStructure = OperatorStructure.NOISE,
    seed: int = 0,
    mixed_signs: bool = False,
) -> OperatorMatrix:
    """
    Random T with |⟨T h_Q, h_Q⟩| ≥ δ|Q| and a certified ‖T‖ ≤ γ

    Diagonal multipliers are drawn from [δ, (δ+γ)/2]; a zero-diagonal coupling is scaled to
    the remaining budget (γ-δ)/2 as measured by certified_norm_upper.

    Args:
        resolution: N of the space V_N
        delta: lower bound for the diagonal
        gamma: norm bound
        exponents: exponent pair in which ‖T‖ ≤ γ is certified
        structure: shape of the off-diagonal part
        seed: top-level seed, consumed under "generate/<structure>"
        mixed_signs: draw random signs for the diagonal
    """
    structure = OperatorStructure(structure)
    if delta <= 0:
        raise ConfigError(f"delta must be positive, got {delta}")
    if delta > gamma:
        raise GenerationError(
            f"No operator has diagonal ≥ δ={delta} with norm ≤ Γ={gamma}",
            {"delta": delta, "gamma": gamma},
        )
    rng = derive_rng(seed, f"generate/{structure.value}")
    space = SpaceDescriptor(resolution=resolution, exponents=exponents)
    dim = space.dim
    budget = (gamma - delta) / 2.0
    multipliers = delta + rng.uniform(0.0, 1.0, size=dim) * budget
    if mixed_signs:
        multipliers *= rng.choice([-1.0, 1.0], size=dim)
    diag_part = OperatorMatrix.diagonal_multiplier(multipliers, resolution, exponents)

    coupling_norm = 0.0
    action = diag_part.action
    if structure != OperatorStructure.DIAGONAL and budget > 0 and dim > 1:
        coupling = OperatorMatrix.from_action(_coupling(resolution, structure, rng), space, space)
        raw = certified_norm_upper(coupling, exponents)
        if raw > 0:
            coupling = coupling.scaled(budget / raw)
            coupling_norm = certified_norm_upper(coupling, exponents)
            action = action + coupling.action
    T = OperatorMatrix.from_action(action, space, space)

    check = has_large_diagonal(T, delta)
    certified = spectral_norm(T) if exponents.is_euclidean else float(np.max(np.abs(multipliers))) + coupling_norm
    if not check.holds or certified > gamma * (1 + NORM_TOLERANCE):
        raise GenerationError(
            "Generated operator failed its post-conditions",
            {"diagonal_ratio": check.worst_ratio, "certified_norm": certified, "gamma": gamma},
        )
    logger.info(
        "Generated %s operator at N=%d: min diagonal %.6g, certified norm %.6g",
        structure.value, resolution, check.worst_ratio, certified,
    )
    return T
