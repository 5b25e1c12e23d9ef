"""
Factorization of the identity on V_n through an operator T on V_N with large diagonal

Pipeline: sign correction M, Gamlen-Gaudet families, sign search, almost-inverse U,
S = (U·T·I)⁻¹·U, then E = M·B and F = S with F·T·E = Id on V_n.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy import linalg

from config import (
    NEUMANN_TERMS,
    NEUMANN_TOLERANCE,
    PROJECTION_TOLERANCE,
    RESIDUAL_TOLERANCE,
    get_max_resolution,
)
from dyadic import dimension, rectangle_measures
from errors import (
    ConfigError,
    DegenerateDiagonalError,
    FactorizationInfeasibleError,
    ResolutionError,
    SignsNotFoundError,
)
from haar_space import EUCLIDEAN, ExponentPair, SpaceDescriptor
from jones_collections import gamlen_gaudet
from block_basis import BlockBasisSystem, build_system, operator_A, operator_B
from operators import (
    OperatorMatrix,
    has_large_diagonal,
    multiplication_M,
    norm_estimate,
    spectral_norm,
)
from randomization import SignSearchReport, search_signs
from seeding import derive_seed

logger = logging.getLogger(__name__)


# ==================== CONSTANTS ====================

def floor_log2(value: Fraction) -> int:
    """⌊log₂ value⌋ for a positive rational, exactly"""
    if value <= 0:
        raise ConfigError(f"log₂ needs a positive argument, got {value}")
    k = value.numerator.bit_length() - value.denominator.bit_length()
    if Fraction(2) ** k > value:
        k -= 1
    elif Fraction(2) ** (k + 1) <= value:
        k += 1
    return k


def _exact(value: float) -> Fraction:
    return value if isinstance(value, Fraction) else Fraction(value)


class Constants(BaseModel):
    n: int
    eta0: float
    eta0_exact: str = Field(..., description="η0 as an exact rational")
    m0: int
    N_formula: int = Field(..., description="41(n+3) + ⌊4 log₂(Γ/δ) + 4 log₂(1+1/η)⌋")
    dim_V_n: int
    dim_V_N: int
    growth_exponent: Optional[float] = Field(None, description="log dim V_N / log dim V_n, for n ≥ 1")
    union_bound_below_one: bool
    neumann_ratio: float


def theoretical_eta0(n: int, delta, eta) -> Fraction:
    """η0 = ηδ / ((1+η)·2^{8(n+2)})"""
    delta, eta = _exact(delta), _exact(eta)
    return eta * delta / ((1 + eta) * 2 ** (8 * (n + 2)))


def theoretical_m0(n: int, gamma, eta0) -> int:
    """Smallest m0 with 2^{m0} > 2^{8(n+3)}Γ⁴/η0⁴"""
    ratio = Fraction(2) ** (8 * (n + 3)) * _exact(gamma) ** 4 / _exact(eta0) ** 4
    return floor_log2(ratio) + 1 if ratio >= 1 else 0


def dimension_formula(n: int, delta, gamma, eta) -> int:
    """N = 41(n+3) + ⌊4 log₂(Γ/δ) + 4 log₂(1+1/η)⌋"""
    delta, gamma, eta = _exact(delta), _exact(gamma), _exact(eta)
    return 41 * (n + 3) + floor_log2((gamma / delta) ** 4 * (1 + 1 / eta) ** 4)


def neumann_ratio(n: int, delta: float, eta0: float) -> float:
    """η0·2^{8(n+1)} / (δ - η0·2^{2n}); infinite when the denominator is not positive"""
    denominator = delta - eta0 * 2.0 ** (2 * n)
    if denominator <= 0:
        return math.inf
    return eta0 * 2.0 ** (8 * (n + 1)) / denominator


def union_bound_below_one(n: int, gamma, m0: int, eta0) -> bool:
    """2^{4(n+3)}Γ²/(2^{m0/2}η0²) < 1, decided after squaring"""
    eta0 = _exact(eta0)
    if eta0 <= 0:
        return False
    return Fraction(2) ** (8 * (n + 3)) * _exact(gamma) ** 4 < Fraction(2) ** m0 * eta0 ** 4


def constants(n: int, delta: float, gamma: float, eta: float) -> Constants:
    if n < 0:
        raise ConfigError(f"n must be nonnegative, got {n}")
    if delta <= 0 or eta <= 0:
        raise ConfigError(f"delta and eta must be positive, got delta={delta}, eta={eta}")
    if gamma < delta:
        raise ConfigError(f"gamma must be at least delta, got gamma={gamma}, delta={delta}")
    eta0 = theoretical_eta0(n, delta, eta)
    m0 = theoretical_m0(n, gamma, eta0)
    N = dimension_formula(n, delta, gamma, eta)
    dim_n, dim_N = dimension(n) ** 2, dimension(N) ** 2
    return Constants(
        n=n,
        eta0=float(eta0),
        eta0_exact=str(eta0),
        m0=m0,
        N_formula=N,
        dim_V_n=dim_n,
        dim_V_N=dim_N,
        growth_exponent=math.log(dim_N) / math.log(dim_n) if n >= 1 else None,
        union_bound_below_one=union_bound_below_one(n, gamma, m0, eta0),
        neumann_ratio=neumann_ratio(n, delta, float(eta0)),
    )


# ==================== PARAMETERS ====================

class FactorizationMode(str, Enum):
    THEORETICAL = "theoretical"
    PRACTICAL = "practical"


class FactorizationParams(BaseModel):
    n: int = Field(..., ge=0, description="Resolution of the factored space V_n")
    delta: float = Field(..., gt=0, description="Large-diagonal constant δ")
    gamma: float = Field(..., gt=0, description="Norm bound Γ")
    eta: float = Field(1.0, gt=0, description="Slack η in ‖E‖‖F‖ ≤ (1+η)/δ")
    mode: FactorizationMode = FactorizationMode.PRACTICAL
    N: Optional[int] = Field(None, ge=0, description="Practical-mode resolution of T")
    m0: Optional[int] = Field(None, ge=0, description="Practical-mode Gamlen-Gaudet level")
    eta0: Optional[float] = Field(None, ge=0, description="Practical-mode acceptance threshold")
    max_attempts: int = Field(10_000, ge=1, description="Sign search attempts")

    @model_validator(mode="after")
    def check_mode(self) -> "FactorizationParams":
        if self.gamma < self.delta:
            raise ValueError(f"gamma ({self.gamma}) must be at least delta ({self.delta})")
        if self.mode == FactorizationMode.PRACTICAL:
            if self.N is None or self.m0 is None or self.eta0 is None:
                raise ValueError("practical mode requires N, m0 and eta0")
            ceiling = get_max_resolution()
            if not self.m0 + self.n <= self.N <= ceiling:
                raise ValueError(f"practical mode requires m0 + n ≤ N ≤ {ceiling}")
        return self

    def resolved(self) -> Tuple[int, int, float]:
        """(N, m0, eta0) used by the pipeline"""
        if self.mode == FactorizationMode.PRACTICAL:
            return self.N, self.m0, self.eta0
        c = constants(self.n, self.delta, self.gamma, self.eta)
        return c.N_formula, c.m0, c.eta0


# ==================== U AND S ====================

def build_U(T: OperatorMatrix, sys: BlockBasisSystem) -> OperatorMatrix:
    """U f = Σ ⟨f, b_R⟩/⟨T b_R, b_R⟩ b_R, in block coordinates (V_N → V_n)"""
    tau = np.diag(sys.block_gram(T))
    zeros = np.flatnonzero(tau == 0)
    if zeros.size:
        raise DegenerateDiagonalError(
            f"{zeros.size} block diagonal value(s) ⟨T b_R, b_R⟩ vanish",
            {"positions": zeros[:20].tolist()},
        )
    measures = rectangle_measures(sys.target_resolution)
    action = (sys.coefficients * measures[:, None]).T / tau[:, None]
    small = SpaceDescriptor(resolution=sys.domain_resolution, exponents=T.domain.exponents)
    return OperatorMatrix.from_action(action, T.codomain, small)


def almost_inverse_defect(T: OperatorMatrix, sys: BlockBasisSystem, U: OperatorMatrix) -> np.ndarray:
    """U·T·I - Id on block coordinates"""
    uti = U.action @ T.action @ sys.coefficients
    return uti - np.eye(uti.shape[0])


def closed_form_defect(T: OperatorMatrix, sys: BlockBasisSystem) -> np.ndarray:
    """⟨T b_R, b_R′⟩/⟨T b_R′, b_R′⟩ at (R′, R), zero on the diagonal"""
    block = sys.block_gram(T)
    defect = block / np.diag(block)[:, None]
    np.fill_diagonal(defect, 0.0)
    return defect


class InversionReport(BaseModel):
    condition_number: float
    neumann_ratio: float
    neumann_checked: bool = Field(..., description="Whether the ratio was below 1 so the series was compared")
    neumann_error: Optional[float] = None
    neumann_converged: Optional[bool] = None
    inverse_norm: float = Field(..., description="Exact p=q=2 norm of (U·T·I)⁻¹")
    geometric_bound: Optional[float] = Field(None, description="1/(1 - ratio) when the ratio is below 1")


def build_S(
    T: OperatorMatrix,
    sys: BlockBasisSystem,
    U: OperatorMatrix,
    ratio: float = math.inf,
) -> Tuple[OperatorMatrix, InversionReport]:
    """S = (U·T·I)⁻¹·U by direct inversion, with a Neumann cross-check when ratio < 1"""
    uti = U.action @ T.action @ sys.coefficients
    identity = np.eye(uti.shape[0])
    try:
        condition = float(np.linalg.cond(uti))
        inverse = linalg.solve(uti, identity)
    except (linalg.LinAlgError, ValueError) as e:
        raise FactorizationInfeasibleError(f"U·T·I is singular: {str(e)}")
    if not np.isfinite(condition) or condition * np.finfo(float).eps > 1:
        raise FactorizationInfeasibleError(
            "U·T·I is numerically singular", {"condition_number": condition}
        )
    logger.debug("U·T·I condition number %.3g", condition)

    checked = ratio < 1
    error, converged = None, None
    if checked:
        defect = identity - uti
        partial, term = identity.copy(), identity.copy()
        for _ in range(NEUMANN_TERMS - 1):
            term = term @ defect
            partial += term
        error = float(np.max(np.abs(partial - inverse)))
        converged = error <= NEUMANN_TOLERANCE
        if not converged:
            logger.warning("Neumann partial sums differ from the direct inverse by %.3g", error)

    small = U.codomain
    inverse_op = OperatorMatrix.from_action(inverse, small, small)
    report = InversionReport(
        condition_number=condition,
        neumann_ratio=ratio,
        neumann_checked=checked,
        neumann_error=error,
        neumann_converged=converged,
        inverse_norm=spectral_norm(inverse_op),
        geometric_bound=1.0 / (1.0 - ratio) if checked else None,
    )
    S = OperatorMatrix.from_action(inverse @ U.action, U.domain, small)
    return S, report


# ==================== PIPELINE ====================

def factorization_residual(E: OperatorMatrix, F: OperatorMatrix, T: OperatorMatrix) -> float:
    """max-entry |F·T·E - Id| on coefficients"""
    product = F.action @ T.action @ E.action
    return float(np.max(np.abs(product - np.eye(product.shape[0]))))


@dataclass
class FactorizationArtifacts:
    params: FactorizationParams
    T: OperatorMatrix
    E: OperatorMatrix
    F: OperatorMatrix
    system: BlockBasisSystem
    search: SignSearchReport
    residual: float
    norm_product_lower: float
    theoretical_bound: float
    neumann_ratio: float
    inversion: Optional[InversionReport] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_bundle(self) -> Dict[str, Any]:
        return {
            "kind": "factorization",
            "params": self.params.model_dump(mode="json"),
            "T": self.T.to_dict(),
            "E": self.E.to_dict(),
            "F": self.F.to_dict(),
            "system": self.system.to_dict(),
            "search": self.search.model_dump(mode="json"),
            "residual": self.residual,
            "norm_product_lower": self.norm_product_lower,
            "theoretical_bound": self.theoretical_bound,
            "neumann_ratio": self.neumann_ratio,
            "inversion": self.inversion.model_dump(mode="json") if self.inversion else None,
            "metadata": self.metadata,
        }

    @classmethod
    def from_bundle(cls, bundle: Dict[str, Any]) -> "FactorizationArtifacts":
        if bundle.get("kind") != "factorization":
            raise ConfigError(f"Expected a factorization bundle, got kind={bundle.get('kind')!r}")
        try:
            inversion = bundle.get("inversion")
            return cls(
                params=FactorizationParams.model_validate(bundle["params"]),
                T=OperatorMatrix.from_dict(bundle["T"]),
                E=OperatorMatrix.from_dict(bundle["E"]),
                F=OperatorMatrix.from_dict(bundle["F"]),
                system=BlockBasisSystem.from_dict(bundle["system"]),
                search=SignSearchReport.model_validate(bundle["search"]),
                residual=float(bundle["residual"]),
                norm_product_lower=float(bundle["norm_product_lower"]),
                theoretical_bound=float(bundle["theoretical_bound"]),
                neumann_ratio=float(bundle["neumann_ratio"]),
                inversion=InversionReport.model_validate(inversion) if inversion else None,
                metadata=dict(bundle.get("metadata", {})),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"Malformed factorization bundle: {str(e)}")


def factorize(
    T: OperatorMatrix,
    params: FactorizationParams,
    seed: int,
    threads: int = 1,
    exponents: Optional[ExponentPair] = None,
) -> FactorizationArtifacts:
    exponents = exponents or T.domain.exponents
    timings = {}
    started = time.perf_counter()

    if params.mode == FactorizationMode.THEORETICAL:
        c = constants(params.n, params.delta, params.gamma, params.eta)
        raise FactorizationInfeasibleError(
            f"Theoretical mode needs N={c.N_formula}; only the constants are computable",
            {"constants": c.model_dump(mode="json")},
        )
    N, m0, eta0 = params.resolved()
    if T.domain.resolution != N or not T.is_square:
        raise ResolutionError(f"Operator is defined at N={T.domain.resolution}, parameters request N={N}")
    check = has_large_diagonal(T, params.delta)
    if not check.holds:
        raise DegenerateDiagonalError(
            f"Diagonal ratio {check.worst_ratio:.6g} at {check.worst} is below δ={params.delta}",
            check.model_dump(mode="json"),
        )

    M = multiplication_M(T)
    corrected = T.compose(M)
    xfam, yfam = gamlen_gaudet(params.n, m0, N, max_resolution=N)
    timings["setup"] = time.perf_counter() - started

    search = search_signs(
        corrected, xfam, yfam, eta0, params.max_attempts, derive_seed(seed, "search"),
        threads=threads, gamma=params.gamma, m0=m0,
    )
    timings["search"] = time.perf_counter() - started - timings["setup"]
    if not search.accepted:
        raise SignsNotFoundError(f"No admissible signs in {params.max_attempts} attempts", search)
    theta, eps = search.signs(N)
    system = build_system(xfam, yfam, theta, eps)

    ratio = neumann_ratio(params.n, params.delta, eta0)
    U = build_U(corrected, system)
    S, inversion = build_S(corrected, system, U, ratio)

    E = M.compose(operator_B(system, exponents)).with_exponents(exponents)
    F = S.with_exponents(exponents)
    residual = factorization_residual(E, F, T)
    lower = norm_estimate(E, exponents, seed=derive_seed(seed, "norm/E")).lower * \
        norm_estimate(F, exponents, seed=derive_seed(seed, "norm/F")).lower
    timings["total"] = time.perf_counter() - started
    logger.info("Factorization residual %.3g, norm product ≥ %.6g", residual, lower)
    return FactorizationArtifacts(
        params=params,
        T=T,
        E=E,
        F=F,
        system=system,
        search=search,
        residual=residual,
        norm_product_lower=lower,
        theoretical_bound=(1 + params.eta) / params.delta,
        neumann_ratio=ratio,
        inversion=inversion,
        metadata={"timings": timings, "threads": threads},
    )


# ==================== VERIFICATION ====================

class VerificationReport(BaseModel):
    residual: float
    residual_ok: bool
    norm_product_lower: float
    theoretical_bound: float
    within_bound: bool = Field(..., description="norm_product_lower ≤ (1+η)/δ·(1+1e-9)")
    exact_product: Optional[float] = Field(None, description="p=q=2 only")
    arithmetic_bound: Optional[float] = Field(None, description="1/(δ - η0(2^{2n}+2^{8(n+1)})) when positive")
    within_arithmetic_bound: Optional[bool] = None
    U_norm: Optional[float] = Field(None, description="Exact p=q=2 norm of U")
    U_bound: Optional[float] = Field(None, description="1/(δ - η0·2^{2n}) when positive")
    transpose_error: float = Field(..., description="max |adjoint(B) - A| on Gram entries")
    projection_error: float = Field(..., description="max entry of |A·B − Id| and |P² − P| for the block system")
    passed: bool


def verify_diagram(
    artifacts: FactorizationArtifacts,
    T: Optional[OperatorMatrix] = None,
    exponents: ExponentPair = EUCLIDEAN,
    samples: int = 200,
    seed: int = 0,
) -> VerificationReport:
    """Re-check the factorization diagram from the artifacts alone"""
    T = T or artifacts.T
    params = artifacts.params
    _, _, eta0 = params.resolved()
    E, F = artifacts.E.with_exponents(exponents), artifacts.F.with_exponents(exponents)
    residual = factorization_residual(E, F, T)

    lower = norm_estimate(E, exponents, samples, derive_seed(seed, "verify/E")).lower * \
        norm_estimate(F, exponents, samples, derive_seed(seed, "verify/F")).lower
    bound = (1 + params.eta) / params.delta
    within = lower <= bound * (1 + RESIDUAL_TOLERANCE)

    exact = arithmetic = within_arithmetic = U_norm = U_bound = None
    if exponents.is_euclidean:
        exact = spectral_norm(E) * spectral_norm(F)
        denominator = params.delta - eta0 * (2.0 ** (2 * params.n) + 2.0 ** (8 * (params.n + 1)))
        if denominator > 0:
            arithmetic = 1.0 / denominator
            within_arithmetic = exact <= arithmetic * (1 + RESIDUAL_TOLERANCE)
        corrected = T.compose(multiplication_M(T))
        U_norm = spectral_norm(build_U(corrected, artifacts.system))
        if params.delta - eta0 * 2.0 ** (2 * params.n) > 0:
            U_bound = 1.0 / (params.delta - eta0 * 2.0 ** (2 * params.n))

    B = operator_B(artifacts.system, exponents)
    A = operator_A(artifacts.system, exponents)
    transpose_error = float(np.max(np.abs(B.adjoint().gram - A.gram)))
    product = A.action @ B.action
    projection = B.action @ A.action
    projection_error = float(max(
        np.max(np.abs(product - np.eye(product.shape[0]))),
        np.max(np.abs(projection @ projection - projection)),
    ))
    projection_ok = projection_error <= PROJECTION_TOLERANCE

    residual_ok = residual <= RESIDUAL_TOLERANCE
    report = VerificationReport(
        residual=residual,
        residual_ok=residual_ok,
        norm_product_lower=lower,
        theoretical_bound=bound,
        within_bound=within,
        exact_product=exact,
        arithmetic_bound=arithmetic,
        within_arithmetic_bound=within_arithmetic,
        U_norm=U_norm,
        U_bound=U_bound,
        transpose_error=transpose_error,
        projection_error=projection_error,
        passed=residual_ok and within and projection_ok,
    )
    if not report.passed:
        logger.warning("Diagram verification failed: residual %.3g, product %.6g vs bound %.6g, projection %.3g",
                       residual, lower, bound, projection_error)
    return report
