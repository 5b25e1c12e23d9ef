"""
Interval collections I ↦ 𝒳_I: Jones compatibility, Capon's local product condition,
and the Gamlen-Gaudet construction
Set measures are computed exactly as cell counts on the target-resolution grid
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from itertools import combinations
from types import MappingProxyType
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, Field, model_validator

from config import get_max_resolution
from dyadic import DyadicInterval, DyadicRectangle, UNIT_INTERVAL, intervals_at_level, intervals_up_to
from errors import ConfigError, IncompleteFamilyError, ResolutionError

logger = logging.getLogger(__name__)


class ConditionTag(str, Enum):
    J1 = "J1"
    J2 = "J2"
    J3 = "J3"
    J4 = "J4"
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"
    P4 = "P4"


class Violation(BaseModel):
    condition: ConditionTag = Field(..., description="Violated condition")
    witness: List[str] = Field(default_factory=list, description="Intervals or rectangles exhibiting the violation")
    ratio: Optional[float] = Field(None, description="Measured ratio, when the condition is quantitative")
    message: str = Field("", description="Human-readable explanation")


class ConditionReport(BaseModel):
    passed: bool
    violations: List[Violation] = Field(default_factory=list)
    kappa: float = Field(1.0, description="Constant the conditions were checked with")

    @model_validator(mode="after")
    def consistent(self) -> "ConditionReport":
        if self.passed != (not self.violations):
            raise ValueError("passed must be true exactly when there are no violations")
        return self

    @classmethod
    def from_violations(cls, violations: List[Violation], kappa: float) -> "ConditionReport":
        return cls(passed=not violations, violations=violations, kappa=kappa)

    def tags(self) -> List[str]:
        return sorted({v.condition.value for v in self.violations})


@dataclass(frozen=True, eq=False)
class CollectionFamily:
    """Assignments I ↦ 𝒳_I for I ∈ 𝒟_{≤n}, with 𝒳_I ⊆ 𝒟_{≤N}"""

    domain_resolution: int
    target_resolution: int
    assignments: Mapping[DyadicInterval, FrozenSet[DyadicInterval]]
    kappa: float = 1.0
    unions: Mapping[DyadicInterval, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.kappa < 1:
            raise ConfigError(f"kappa must be at least 1, got {self.kappa}")
        if self.target_resolution < self.domain_resolution:
            raise ResolutionError(
                f"Target resolution {self.target_resolution} below domain resolution {self.domain_resolution}"
            )
        frozen = {}
        for I, collection in self.assignments.items():
            if I.level > self.domain_resolution:
                raise ResolutionError(f"Assigned interval {I} outside 𝒟_{{≤{self.domain_resolution}}}")
            collection = frozenset(collection)
            for K in collection:
                if K.level > self.target_resolution:
                    raise ResolutionError(
                        f"Interval {K} in 𝒳_{I} exceeds target resolution {self.target_resolution}"
                    )
            frozen[I] = collection
        unions = {}
        for I, collection in frozen.items():
            mask = 0
            for K in collection:
                mask |= K.cell_mask(self.target_resolution)
            unions[I] = mask
        object.__setattr__(self, "assignments", MappingProxyType(frozen))
        object.__setattr__(self, "unions", MappingProxyType(unions))

    def __getitem__(self, I: DyadicInterval) -> FrozenSet[DyadicInterval]:
        return self.assignments[I]

    def domain(self) -> Tuple[DyadicInterval, ...]:
        return intervals_up_to(self.domain_resolution)

    def missing(self) -> List[DyadicInterval]:
        return [I for I in self.domain() if I not in self.assignments]

    def require_complete(self):
        missing = self.missing()
        if missing:
            raise IncompleteFamilyError(
                f"Family is missing {len(missing)} assignment(s)",
                {"missing": [str(I) for I in missing]},
            )

    def sorted_collection(self, I: DyadicInterval) -> List[DyadicInterval]:
        return sorted(self.assignments[I])

    def union_measure(self, I: DyadicInterval) -> Fraction:
        return Fraction(self.unions[I].bit_count(), 1 << self.target_resolution)

    def support(self) -> List[DyadicInterval]:
        """Every interval appearing in some collection, in canonical order"""
        return sorted(set().union(*self.assignments.values())) if self.assignments else []

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.domain_resolution,
            "N": self.target_resolution,
            "kappa": self.kappa,
            "assignments": {
                str(I): [str(K) for K in self.sorted_collection(I)] for I in sorted(self.assignments)
            },
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CollectionFamily":
        try:
            assignments = {
                DyadicInterval.from_str(key): frozenset(DyadicInterval.from_str(v) for v in values)
                for key, values in data["assignments"].items()
            }
            return cls(
                domain_resolution=int(data["n"]),
                target_resolution=int(data["N"]),
                assignments=assignments,
                kappa=float(data.get("kappa", 1.0)),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise ConfigError(f"Malformed collection family: {str(e)}")


def identity_family(n: int, target_resolution: Optional[int] = None) -> CollectionFamily:
    """𝒳_I = {I}"""
    return CollectionFamily(
        domain_resolution=n,
        target_resolution=n if target_resolution is None else target_resolution,
        assignments={I: frozenset({I}) for I in intervals_up_to(n)},
    )


# ==================== CONDITION CHECKS ====================

def _cells(mask: int) -> int:
    return mask.bit_count()


def _as_fraction(kappa: float) -> Fraction:
    return Fraction(kappa).limit_denominator(10 ** 12)


def _disjointness_violations(fam: CollectionFamily, tag: ConditionTag) -> List[Violation]:
    violations = []
    for I in fam.domain():
        collection = fam.sorted_collection(I)
        if not collection:
            violations.append(Violation(condition=tag, witness=[str(I)], message=f"collection for {I} is empty"))
        for K, K2 in combinations(collection, 2):
            if K.intersects(K2):
                violations.append(Violation(
                    condition=tag,
                    witness=[str(I), str(K), str(K2)],
                    message=f"intervals {K} and {K2} of the collection for {I} overlap",
                ))
    owner: Dict[DyadicInterval, DyadicInterval] = {}
    for I in fam.domain():
        for K in fam.sorted_collection(I):
            if K in owner:
                violations.append(Violation(
                    condition=tag,
                    witness=[str(owner[K]), str(I), str(K)],
                    message=f"interval {K} is assigned to both {owner[K]} and {I}",
                ))
            else:
                owner[K] = I
    return violations


def _nesting_violations(fam: CollectionFamily) -> List[Violation]:
    violations = []
    for I in fam.domain():
        if I.level >= fam.domain_resolution:
            continue
        plus, minus = I.split()
        z, zp, zm = fam.unions[I], fam.unions[plus], fam.unions[minus]
        if (zp | zm) & ~z:
            violations.append(Violation(
                condition=ConditionTag.J2,
                witness=[str(I), str(plus), str(minus)],
                message=f"children unions of {I} are not contained in Z_{I}",
            ))
        if zp & zm:
            violations.append(Violation(
                condition=ConditionTag.J2,
                witness=[str(I), str(plus), str(minus)],
                message=f"children unions of {I} intersect",
            ))
    return violations


def _measure_violations(fam: CollectionFamily, kappa: Fraction, tag: ConditionTag) -> List[Violation]:
    violations = []
    for I in fam.domain():
        ratio = fam.union_measure(I) / I.measure
        if ratio * kappa < 1 or ratio > kappa:
            violations.append(Violation(
                condition=tag,
                witness=[str(I)],
                ratio=float(ratio),
                message=f"|Z_{I}|/|I| = {float(ratio):g} outside [1/κ, κ]",
            ))
    return violations


def _density_pairs(fam: CollectionFamily):
    """(I0, I, K, |K∩Z_I0|/|K| divided by |Z_I0|/|Z_I|) for I0 ⊆ I, K ∈ 𝒳_I"""
    N = fam.target_resolution
    for I in fam.domain():
        z = _cells(fam.unions[I])
        if z == 0:
            continue
        for I0 in fam.domain():
            if not I.contains(I0):
                continue
            z0_mask = fam.unions[I0]
            z0 = _cells(z0_mask)
            for K in fam.sorted_collection(I):
                k_mask = K.cell_mask(N)
                hit = _cells(k_mask & z0_mask)
                # (hit/|K|) / (z0/z) with |K| as a cell count
                numerator = Fraction(hit * z)
                denominator = Fraction(_cells(k_mask) * z0)
                yield I0, I, K, numerator, denominator


def _density_violations(fam: CollectionFamily, kappa: Fraction, tag: ConditionTag) -> List[Violation]:
    violations = []
    for I0, I, K, numerator, denominator in _density_pairs(fam):
        if numerator * kappa < denominator:
            ratio = float(numerator / denominator) if denominator else None
            violations.append(Violation(
                condition=tag,
                witness=[str(I0), str(I), str(K)],
                ratio=ratio,
                message=f"|K∩Z_I0|/|K| below κ⁻¹|Z_I0|/|Z_I| for I0={I0}, I={I}, K={K}",
            ))
    return violations


def check_jones(fam: CollectionFamily) -> ConditionReport:
    """Verify (J1)-(J4) with the family's κ; every violation carries a witness"""
    fam.require_complete()
    kappa = _as_fraction(fam.kappa)
    violations = (
        _disjointness_violations(fam, ConditionTag.J1)
        + _nesting_violations(fam)
        + _measure_violations(fam, kappa, ConditionTag.J3)
        + _density_violations(fam, kappa, ConditionTag.J4)
    )
    if violations:
        logger.debug("Jones check found %d violation(s)", len(violations))
    return ConditionReport.from_violations(violations, fam.kappa)


def smallest_kappa(fam: CollectionFamily) -> Union[Fraction, float]:
    """Smallest κ ≥ 1 for which (J3) and (J4) hold; math.inf when none does"""
    fam.require_complete()
    best = Fraction(1)
    for I in fam.domain():
        z = fam.union_measure(I)
        if z == 0:
            return float("inf")
        best = max(best, z / I.measure, I.measure / z)
    for _, _, _, numerator, denominator in _density_pairs(fam):
        if denominator == 0:
            continue
        if numerator == 0:
            return float("inf")
        best = max(best, denominator / numerator)
    return best


def _product_disjointness_violations(xfam: CollectionFamily, yfam: CollectionFamily) -> List[Violation]:
    violations = []
    # Within 𝓑_{I×J}: K×L and K′×L′ overlap iff both factors overlap
    for I in xfam.domain():
        for J in yfam.domain():
            xs, ys = xfam.sorted_collection(I), yfam.sorted_collection(J)
            if not xs or not ys:
                violations.append(Violation(
                    condition=ConditionTag.P1,
                    witness=[str(DyadicRectangle(I, J))],
                    message=f"product collection for {I}×{J} is empty",
                ))
                continue
            x_overlaps = [(K, K2) for K, K2 in combinations(xs, 2) if K.intersects(K2)]
            y_overlaps = [(L, L2) for L, L2 in combinations(ys, 2) if L.intersects(L2)]
            for K, K2 in x_overlaps:
                violations.append(Violation(
                    condition=ConditionTag.P1,
                    witness=[str(DyadicRectangle(I, J)), str(DyadicRectangle(K, ys[0])), str(DyadicRectangle(K2, ys[0]))],
                    message=f"rectangles of 𝓑_{I}×{J} overlap",
                ))
            for L, L2 in y_overlaps:
                violations.append(Violation(
                    condition=ConditionTag.P1,
                    witness=[str(DyadicRectangle(I, J)), str(DyadicRectangle(xs[0], L)), str(DyadicRectangle(xs[0], L2))],
                    message=f"rectangles of 𝓑_{I}×{J} overlap",
                ))
    # Across: K×L ∈ 𝓑_{R0} ∩ 𝓑_{R1} iff K is shared by the x-collections and L by the y-collections
    x_owners: Dict[DyadicInterval, List[DyadicInterval]] = {}
    for I in xfam.domain():
        for K in xfam.sorted_collection(I):
            x_owners.setdefault(K, []).append(I)
    y_owners: Dict[DyadicInterval, List[DyadicInterval]] = {}
    for J in yfam.domain():
        for L in yfam.sorted_collection(J):
            y_owners.setdefault(L, []).append(J)
    shared_x = {K: owners for K, owners in x_owners.items() if len(owners) > 1}
    shared_y = {L: owners for L, owners in y_owners.items() if len(owners) > 1}
    if shared_x or shared_y:
        for K, x_list in sorted(x_owners.items()):
            for L, y_list in sorted(y_owners.items()):
                if len(x_list) == 1 and len(y_list) == 1:
                    continue
                owners = [DyadicRectangle(I, J) for I in x_list for J in y_list]
                R0, R1 = owners[0], owners[1]
                violations.append(Violation(
                    condition=ConditionTag.P1,
                    witness=[str(R0), str(R1), str(DyadicRectangle(K, L))],
                    message=f"rectangle {K}×{L} belongs to both 𝓑_{R0} and 𝓑_{R1}",
                ))
    return violations


def _separation_violations(fam: CollectionFamily, axis: str) -> List[Violation]:
    violations = []
    domain = fam.domain()
    for I in domain:
        inside = [I0 for I0 in domain if I.contains(I0)]
        for I0, I1 in combinations(inside, 2):
            if I0.intersects(I1):
                continue
            z0, z1, z = fam.unions[I0], fam.unions[I1], fam.unions[I]
            if z0 & z1 or (z0 | z1) & ~z:
                violations.append(Violation(
                    condition=ConditionTag.P2,
                    witness=[axis, str(I), str(I0), str(I1)],
                    message=f"{axis}-unions of disjoint {I0}, {I1} inside {I} are not separated within {I}",
                ))
    return violations


def check_capon(xfam: CollectionFamily, yfam: CollectionFamily) -> ConditionReport:
    """Verify (P1)-(P4) for 𝓑_{I×J} = 𝒳_I ⊗ 𝒴_J with C_X = C_Y = max κ"""
    xfam.require_complete()
    yfam.require_complete()
    if xfam.target_resolution != yfam.target_resolution:
        raise ResolutionError("Both families must share the target resolution")
    constant = max(xfam.kappa, yfam.kappa)
    kappa = _as_fraction(constant)
    violations = _product_disjointness_violations(xfam, yfam)
    for fam, axis in ((xfam, "x"), (yfam, "y")):
        violations += _separation_violations(fam, axis)
    for fam in (xfam, yfam):
        violations += _measure_violations(fam, kappa, ConditionTag.P3)
    for fam in (xfam, yfam):
        violations += _density_violations(fam, kappa, ConditionTag.P4)
    return ConditionReport.from_violations(violations, constant)


# ==================== CONSTRUCTIONS ====================

def gamlen_gaudet(
    n: int,
    m0: int,
    target_resolution: Optional[int] = None,
    max_resolution: Optional[int] = None,
) -> Tuple[CollectionFamily, CollectionFamily]:
    """𝒳_[0,1) = 𝒴_[0,1) = 𝒟_m0, then 𝒳_{I+} = {K+ : K ∈ 𝒳_I}, 𝒳_{I-} = {K- : K ∈ 𝒳_I}"""
    if n < 0 or m0 < 0:
        raise ConfigError(f"n and m0 must be nonnegative, got n={n}, m0={m0}")
    ceiling = get_max_resolution() if max_resolution is None else max_resolution
    target = n + m0 if target_resolution is None else target_resolution
    if m0 + n > target or target > ceiling:
        raise ResolutionError(
            f"Gamlen-Gaudet needs m0 + n ≤ N ≤ {ceiling}; got m0={m0}, n={n}, N={target}",
            {"n": n, "m0": m0, "N": target, "max_resolution": ceiling},
        )
    assignments = {UNIT_INTERVAL: frozenset(intervals_at_level(m0))}
    for level in range(n):
        for I in intervals_at_level(level):
            plus, minus = I.split()
            assignments[plus] = frozenset(K.plus for K in assignments[I])
            assignments[minus] = frozenset(K.minus for K in assignments[I])
    logger.info("Gamlen-Gaudet families built for n=%d, m0=%d, N=%d", n, m0, target)
    xfam = CollectionFamily(domain_resolution=n, target_resolution=target, assignments=assignments)
    yfam = CollectionFamily(domain_resolution=n, target_resolution=target, assignments=assignments)
    return xfam, yfam


def alpha(xfam: CollectionFamily, yfam: CollectionFamily) -> Fraction:
    """Largest measure of an interval in any collection of either family"""
    measures = [K.measure for fam in (xfam, yfam) for collection in fam.assignments.values() for K in collection]
    if not measures:
        raise ConfigError("Families must be nonempty")
    return max(measures)


def level_tiling(fam: CollectionFamily, level: int) -> bool:
    """Whether the unions X_I, I ∈ 𝒟_level, tile [0,1)"""
    full = (1 << (1 << fam.target_resolution)) - 1
    total, combined = 0, 0
    for I in intervals_at_level(level):
        mask = fam.unions[I]
        total += _cells(mask)
        combined |= mask
    return combined == full and total == 1 << fam.target_resolution
