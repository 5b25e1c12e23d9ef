"""
Randomized block basis b_R^(θ,ε) = f_I^(θ) ⊗ g_J^(ε) and the operators B, A, P
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, Iterable, Mapping, Optional

import numpy as np

from dyadic import DyadicInterval, DyadicRectangle, dimension, enumerate_basis, intervals_up_to, rectangle_measures
from errors import ConfigError, InvalidFamilyError, ResolutionError
from haar_space import EUCLIDEAN, ExponentPair, HardyElement, SpaceDescriptor
from jones_collections import CollectionFamily, ConditionReport, check_jones
from operators import OperatorMatrix
from seeding import rademacher

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SignAssignment:
    """θ ∈ {±1}^{𝒟_{≤N}}, stored by canonical interval position"""

    resolution: int
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.int8).ravel()
        if values.shape[0] != dimension(self.resolution):
            raise ResolutionError(
                f"Sign assignment at N={self.resolution} needs {dimension(self.resolution)} values, "
                f"got {values.shape[0]}"
            )
        if not np.all(np.abs(values) == 1):
            raise ConfigError("Signs must be ±1")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __getitem__(self, interval: DyadicInterval) -> int:
        return int(self.values[interval.position])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SignAssignment):
            return NotImplemented
        return self.resolution == other.resolution and np.array_equal(self.values, other.values)

    @classmethod
    def ones(cls, resolution: int) -> "SignAssignment":
        return cls(resolution, np.ones(dimension(resolution), dtype=np.int8))

    @classmethod
    def random(
        cls,
        resolution: int,
        rng: np.random.Generator,
        support: Optional[Iterable[DyadicInterval]] = None,
    ) -> "SignAssignment":
        """Uniform signs on support (everything when omitted), +1 elsewhere"""
        values = np.ones(dimension(resolution), dtype=np.int8)
        if support is None:
            positions = np.arange(values.shape[0])
        else:
            positions = np.array(sorted(I.position for I in support), dtype=np.int64)
        values[positions] = rademacher(rng, positions.shape[0])
        return cls(resolution, values)

    def flipped(self, interval: DyadicInterval) -> "SignAssignment":
        values = self.values.copy()
        values[interval.position] *= -1
        return SignAssignment(self.resolution, values)

    def as_mapping(self) -> Dict[DyadicInterval, int]:
        return {I: int(self.values[I.position]) for I in intervals_up_to(self.resolution)}

    def to_dict(self) -> Dict[str, int]:
        return {str(I): int(self.values[I.position]) for I in intervals_up_to(self.resolution)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], resolution: int) -> "SignAssignment":
        values = np.zeros(dimension(resolution), dtype=np.int8)
        seen = set()
        try:
            for key, sign in data.items():
                interval = DyadicInterval.from_str(key)
                if interval.level > resolution:
                    raise ResolutionError(f"Sign for {interval} outside 𝒟_{{≤{resolution}}}")
                values[interval.position] = int(sign)
                seen.add(interval.position)
        except (TypeError, ValueError, AttributeError, OverflowError) as e:
            raise ConfigError(f"Malformed sign assignment: {str(e)}")
        if len(seen) != values.shape[0]:
            raise ConfigError(f"Sign assignment must be total on 𝒟_{{≤{resolution}}}")
        return cls(resolution, values)


def collection_matrix(fam: CollectionFamily, signs: SignAssignment) -> np.ndarray:
    """d_N × d_n matrix whose column I holds θ_K at position K for K ∈ 𝒳_I"""
    if signs.resolution != fam.target_resolution:
        raise ResolutionError(
            f"Signs at N={signs.resolution} do not match the family's N={fam.target_resolution}"
        )
    matrix = np.zeros((dimension(fam.target_resolution), dimension(fam.domain_resolution)))
    for I in fam.domain():
        for K in fam.assignments[I]:
            matrix[K.position, I.position] = signs.values[K.position]
    return matrix


@dataclass(frozen=True, eq=False)
class BlockBasisSystem:
    xfam: CollectionFamily
    yfam: CollectionFamily
    theta: SignAssignment
    eps: SignAssignment

    @property
    def domain_resolution(self) -> int:
        return self.xfam.domain_resolution

    @property
    def target_resolution(self) -> int:
        return self.xfam.target_resolution

    @cached_property
    def fx(self) -> np.ndarray:
        return collection_matrix(self.xfam, self.theta)

    @cached_property
    def gy(self) -> np.ndarray:
        return collection_matrix(self.yfam, self.eps)

    @cached_property
    def coefficients(self) -> np.ndarray:
        """d_N² × d_n² matrix whose column R is the Haar coefficient vector of b_R"""
        matrix = np.kron(self.fx, self.gy)
        matrix.setflags(write=False)
        return matrix

    @cached_property
    def squared_norms(self) -> np.ndarray:
        """‖b_R‖₂² in canonical order"""
        return (self.coefficients ** 2).T @ rectangle_measures(self.target_resolution)

    @cached_property
    def elements(self) -> Dict[DyadicRectangle, HardyElement]:
        basis = enumerate_basis(self.domain_resolution, self.target_resolution)
        return {
            rect: HardyElement(self.target_resolution, self.coefficients[:, k])
            for k, rect in enumerate(basis)
        }

    def element(self, rect: DyadicRectangle) -> HardyElement:
        return self.elements[rect]

    def block_gram(self, T: OperatorMatrix) -> np.ndarray:
        """Gb[R′, R] = ⟨T b_R, b_R′⟩"""
        return self.coefficients.T @ T.gram @ self.coefficients

    def with_signs(self, theta: SignAssignment, eps: SignAssignment) -> "BlockBasisSystem":
        return BlockBasisSystem(self.xfam, self.yfam, theta, eps)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "xfam": self.xfam.to_dict(),
            "yfam": self.yfam.to_dict(),
            "theta": self.theta.to_dict(),
            "eps": self.eps.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BlockBasisSystem":
        try:
            xfam = CollectionFamily.from_dict(data["xfam"])
            yfam = CollectionFamily.from_dict(data["yfam"])
            theta = SignAssignment.from_dict(data["theta"], xfam.target_resolution)
            eps = SignAssignment.from_dict(data["eps"], yfam.target_resolution)
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise ConfigError(f"Malformed block system: {str(e)}")
        return build_system(xfam, yfam, theta, eps, validate=False)


def _merged_report(reports) -> ConditionReport:
    violations = [v for report in reports for v in report.violations]
    return ConditionReport.from_violations(violations, max(r.kappa for r in reports))


def build_system(
    xfam: CollectionFamily,
    yfam: CollectionFamily,
    theta: Optional[SignAssignment] = None,
    eps: Optional[SignAssignment] = None,
    validate: bool = True,
) -> BlockBasisSystem:
    """Block system for the product collections 𝒳_I ⊗ 𝒴_J; missing signs default to +1"""
    if (xfam.domain_resolution, xfam.target_resolution) != (yfam.domain_resolution, yfam.target_resolution):
        raise ResolutionError(
            "Families must share domain and target resolutions",
            {"x": [xfam.domain_resolution, xfam.target_resolution],
             "y": [yfam.domain_resolution, yfam.target_resolution]},
        )
    xfam.require_complete()
    yfam.require_complete()
    if validate:
        report = _merged_report([check_jones(xfam), check_jones(yfam)])
        if not report.passed:
            raise InvalidFamilyError("Collection families fail the Jones conditions", report)
    N = xfam.target_resolution
    theta = theta or SignAssignment.ones(N)
    eps = eps or SignAssignment.ones(N)
    for name, signs in (("theta", theta), ("eps", eps)):
        if signs.resolution != N:
            raise ResolutionError(f"{name} is defined at N={signs.resolution}, families at N={N}")
    system = BlockBasisSystem(xfam, yfam, theta, eps)
    logger.debug("Block system built: n=%d, N=%d", xfam.domain_resolution, N)
    return system


def _spaces(sys: BlockBasisSystem, exponents: ExponentPair):
    small = SpaceDescriptor(resolution=sys.domain_resolution, exponents=exponents)
    large = SpaceDescriptor(resolution=sys.target_resolution, exponents=exponents)
    return small, large


def operator_B(sys: BlockBasisSystem, exponents: ExponentPair = EUCLIDEAN) -> OperatorMatrix:
    """V_n → V_N, h_R ↦ b_R"""
    small, large = _spaces(sys, exponents)
    return OperatorMatrix.from_action(sys.coefficients, small, large)


def operator_A(sys: BlockBasisSystem, exponents: ExponentPair = EUCLIDEAN) -> OperatorMatrix:
    """V_N → V_n, f ↦ Σ ⟨f, b_R⟩/‖b_R‖₂² h_R"""
    small, large = _spaces(sys, exponents)
    action = (sys.coefficients * rectangle_measures(sys.target_resolution)[:, None]).T
    return OperatorMatrix.from_action(action / sys.squared_norms[:, None], large, small)


def projection_P(sys: BlockBasisSystem, exponents: ExponentPair = EUCLIDEAN) -> OperatorMatrix:
    """P = B·A, the projection of V_N onto span{b_R}"""
    return operator_B(sys, exponents).compose(operator_A(sys, exponents))
