"""
Random variables W, X, Y, Z over the block-basis signs, their moments, and the sign search
Each variable is a bilinear form Θ2ᵀ·G·E2 in the sign products θ_Kθ_K′ and ε_Lε_L′,
so moments only depend on the signs of intervals in the supporting collections
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, TextIO, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from config import ENUMERATION_CAP, MIN_MC_TRIALS
from dyadic import DyadicInterval, dimension, intervals_up_to
from errors import ConfigError, EnumerationCapError, IndexConstraintError, ResolutionError
from haar_space import ExponentPair
from jones_collections import CollectionFamily, alpha, gamlen_gaudet
from block_basis import SignAssignment, build_system
from operators import OperatorMatrix, certified_norm_upper
from seeding import derive_rng, derive_seed, rademacher

logger = logging.getLogger(__name__)


class Variable(str, Enum):
    W = "W"
    X = "X"
    Y = "Y"
    Z = "Z"


BOUND_MULTIPLIERS = {Variable.W: 1, Variable.X: 4, Variable.Y: 4, Variable.Z: 12}


@dataclass(frozen=True)
class VariableIndices:
    """Defining intervals; I2/J2 stand for I′/J′ and are None where the variable has no such index"""

    I: DyadicInterval
    J: DyadicInterval
    I2: Optional[DyadicInterval] = None
    J2: Optional[DyadicInterval] = None

    def source(self) -> Tuple[DyadicInterval, DyadicInterval]:
        return self.I, self.J

    def target(self) -> Tuple[DyadicInterval, DyadicInterval]:
        return (self.I2 or self.I), (self.J2 or self.J)

    def labels(self) -> List[str]:
        return [str(self.I), str(self.I2 or ""), str(self.J), str(self.J2 or "")]

    def __str__(self) -> str:
        parts = [str(self.I)] + ([str(self.I2)] if self.I2 else []) + [str(self.J)] + ([str(self.J2)] if self.J2 else [])
        return ";".join(parts)


def validate_indices(variable: Variable, indices: VariableIndices, n: int):
    variable = Variable(variable)
    for interval in (indices.I, indices.J, indices.I2, indices.J2):
        if interval is not None and interval.level > n:
            raise IndexConstraintError(f"Index {interval} outside 𝒟_{{≤{n}}}")
    needs_i2 = variable in (Variable.W, Variable.X)
    needs_j2 = variable in (Variable.W, Variable.Y)
    if needs_i2 != (indices.I2 is not None) or needs_j2 != (indices.J2 is not None):
        raise IndexConstraintError(f"{variable.value} takes indices {_signature(variable)}, got {indices}")
    if needs_i2 and indices.I2 == indices.I:
        raise IndexConstraintError(f"{variable.value} requires I ≠ I′", {"I": str(indices.I)})
    if needs_j2 and indices.J2 == indices.J:
        raise IndexConstraintError(f"{variable.value} requires J ≠ J′", {"J": str(indices.J)})


def _signature(variable: Variable) -> str:
    return {
        Variable.W: "(I, I′, J, J′)",
        Variable.X: "(I, I′, J)",
        Variable.Y: "(I, J, J′)",
        Variable.Z: "(I, J)",
    }[variable]


def admissible_indices(variable: Variable, n: int) -> List[VariableIndices]:
    """All index tuples over 𝒟_{≤n} meeting the variable's constraints"""
    variable = Variable(variable)
    intervals = intervals_up_to(n)
    pairs = [(a, b) for a in intervals for b in intervals if a != b]
    if variable == Variable.W:
        return [VariableIndices(I, J, I2, J2) for I, I2 in pairs for J, J2 in pairs]
    if variable == Variable.X:
        return [VariableIndices(I, J, I2=I2) for I, I2 in pairs for J in intervals]
    if variable == Variable.Y:
        return [VariableIndices(I, J, J2=J2) for I in intervals for J, J2 in pairs]
    return [VariableIndices(I, J) for I in intervals for J in intervals]


# ==================== BILINEAR FORM ====================

@dataclass(frozen=True)
class BilinearForm:
    """value(θ, ε) = Θ2ᵀ·G·E2 with Θ2 = (θ_K θ_K′) over x-pairs and E2 = (ε_L ε_L′) over y-pairs"""

    x_support: Tuple[DyadicInterval, ...]
    y_support: Tuple[DyadicInterval, ...]
    x_pairs: np.ndarray  # (pairs, 2) indices into x_support: (K, K′)
    y_pairs: np.ndarray
    matrix: np.ndarray

    def products(self, signs: np.ndarray, pairs: np.ndarray) -> np.ndarray:
        """Sign products for a batch of sign rows over the support"""
        return signs[..., pairs[:, 0]] * signs[..., pairs[:, 1]]

    def evaluate(self, theta: np.ndarray, eps: np.ndarray) -> np.ndarray:
        """Values for batches of support signs of shape (k, |x_support|), (k, |y_support|)"""
        left = self.products(np.atleast_2d(theta), self.x_pairs).astype(np.float64)
        right = self.products(np.atleast_2d(eps), self.y_pairs).astype(np.float64)
        return np.einsum("ka,ab,kb->k", left, self.matrix, right)


def bilinear_form(
    T: OperatorMatrix,
    xfam: CollectionFamily,
    yfam: CollectionFamily,
    variable: Variable,
    indices: VariableIndices,
) -> BilinearForm:
    variable = Variable(variable)
    validate_indices(variable, indices, xfam.domain_resolution)
    if T.domain.resolution != xfam.target_resolution or not T.is_square:
        raise ResolutionError(
            f"Operator on N={T.domain.resolution} does not act on the families' N={xfam.target_resolution}"
        )
    (I, J), (I2, J2) = indices.source(), indices.target()
    xs, xs2 = xfam.sorted_collection(I), xfam.sorted_collection(I2)
    ys, ys2 = yfam.sorted_collection(J), yfam.sorted_collection(J2)
    x_support = tuple(sorted(set(xs) | set(xs2)))
    y_support = tuple(sorted(set(ys) | set(ys2)))
    x_at = {K: k for k, K in enumerate(x_support)}
    y_at = {L: k for k, L in enumerate(y_support)}
    x_pairs = np.array([(x_at[K], x_at[K2]) for K in xs for K2 in xs2], dtype=np.int64)
    y_pairs = np.array([(y_at[L], y_at[L2]) for L in ys for L2 in ys2], dtype=np.int64)

    side = dimension(T.domain.resolution)
    src_x = np.array([K.position for K in xs])
    dst_x = np.array([K.position for K in xs2])
    src_y = np.array([L.position for L in ys])
    dst_y = np.array([L.position for L in ys2])
    # G[(K,K′), (L,L′)] = gram[K′×L′, K×L]
    rows = (dst_x[None, :, None, None] * side + dst_y[None, None, None, :])
    cols = (src_x[:, None, None, None] * side + src_y[None, None, :, None])
    matrix = T.gram[rows, cols].reshape(len(xs) * len(xs2), len(ys) * len(ys2)).copy()
    if variable == Variable.Z:
        same_x = x_pairs[:, 0] == x_pairs[:, 1]
        same_y = y_pairs[:, 0] == y_pairs[:, 1]
        matrix[np.ix_(same_x, same_y)] = 0.0
    return BilinearForm(x_support, y_support, x_pairs, y_pairs, matrix)


def _support_signs(signs: SignAssignment, support: Iterable[DyadicInterval]) -> np.ndarray:
    return np.array([signs.values[K.position] for K in support], dtype=np.int64)


def eval_rv(
    T: OperatorMatrix,
    xfam: CollectionFamily,
    yfam: CollectionFamily,
    theta: SignAssignment,
    eps: SignAssignment,
    variable: Variable,
    indices: VariableIndices,
) -> float:
    """W, X, Y or Z at the given signs"""
    form = bilinear_form(T, xfam, yfam, variable, indices)
    value = form.evaluate(_support_signs(theta, form.x_support), _support_signs(eps, form.y_support))
    return float(value[0])


# ==================== MOMENTS ====================

class MomentMethod(str, Enum):
    MONTE_CARLO = "monte-carlo"
    EXHAUSTIVE = "exhaustive"


class MomentReport(BaseModel):
    variable: Variable
    indices: List[str] = Field(..., description="Defining intervals in the order (I, I′, J, J′) that apply")
    trials: int = Field(..., description="Samples drawn, or sign patterns enumerated")
    mean: float
    second_moment: float
    stderr_mean: float = 0.0
    stderr_second: float = 0.0
    bound: float = Field(..., description="Multiplier × ‖T‖² α^{1/2}")
    norm_upper: float = Field(..., description="Certified upper bound for ‖T‖ used in the bound")
    alpha: float
    method: MomentMethod

    @model_validator(mode="after")
    def exhaustive_is_exact(self) -> "MomentReport":
        if self.method == MomentMethod.EXHAUSTIVE and (self.stderr_mean or self.stderr_second):
            raise ValueError("exhaustive reports carry no standard errors")
        return self

    @property
    def within_bound(self) -> bool:
        return self.second_moment - 3 * self.stderr_second <= self.bound


def _index_labels(variable: Variable, indices: VariableIndices) -> List[str]:
    labels = [str(indices.I)]
    if indices.I2 is not None:
        labels.append(str(indices.I2))
    labels.append(str(indices.J))
    if indices.J2 is not None:
        labels.append(str(indices.J2))
    return labels


def theorem_bound(
    T: OperatorMatrix,
    xfam: CollectionFamily,
    yfam: CollectionFamily,
    variable: Variable,
    exponents: Optional[ExponentPair] = None,
) -> Tuple[float, float, float]:
    """(bound, certified ‖T‖, α) for the second moment of the variable"""
    norm = certified_norm_upper(T, exponents or T.domain.exponents)
    a = float(alpha(xfam, yfam))
    return BOUND_MULTIPLIERS[Variable(variable)] * norm ** 2 * math.sqrt(a), norm, a


def sign_patterns(k: int) -> np.ndarray:
    """All 2^k sign vectors of length k, as int64 rows"""
    codes = np.arange(1 << k, dtype=np.int64)[:, None]
    return ((codes >> np.arange(k, dtype=np.int64)) & 1) * 2 - 1


def exhaustive_moments(
    T: OperatorMatrix,
    xfam: CollectionFamily,
    yfam: CollectionFamily,
    variable: Variable,
    indices: VariableIndices,
    exponents: Optional[ExponentPair] = None,
) -> MomentReport:
    """Exact mean and second moment over all signs of the supporting intervals"""
    variable = Variable(variable)
    form = bilinear_form(T, xfam, yfam, variable, indices)
    kx, ky = len(form.x_support), len(form.y_support)
    if kx > ENUMERATION_CAP or ky > ENUMERATION_CAP:
        raise EnumerationCapError(
            f"Support of {kx}×{ky} intervals exceeds the enumeration cap of {ENUMERATION_CAP} per axis",
            {"x_support": kx, "y_support": ky, "cap": ENUMERATION_CAP},
        )
    left = form.products(sign_patterns(kx), form.x_pairs)
    right = form.products(sign_patterns(ky), form.y_pairs)
    patterns = float(1 << (kx + ky))
    # Integer sign sums vanish off the diagonal pairs, so the mean is exactly 0 there
    mean = float(left.sum(axis=0) @ form.matrix @ right.sum(axis=0)) / patterns
    left_gram = (left.T @ left).astype(np.float64)
    right_gram = (right.T @ right).astype(np.float64)
    second = float(np.trace(form.matrix.T @ left_gram @ form.matrix @ right_gram)) / patterns
    bound, norm, a = theorem_bound(T, xfam, yfam, variable, exponents)
    return MomentReport(
        variable=variable,
        indices=_index_labels(variable, indices),
        trials=1 << (kx + ky),
        mean=mean,
        second_moment=second,
        bound=bound,
        norm_upper=norm,
        alpha=a,
        method=MomentMethod.EXHAUSTIVE,
    )


def mc_moments(
    T: OperatorMatrix,
    xfam: CollectionFamily,
    yfam: CollectionFamily,
    variable: Variable,
    indices: VariableIndices,
    trials: int,
    seed: int,
    exponents: Optional[ExponentPair] = None,
    trace: Optional[TextIO] = None,
) -> MomentReport:
    """Monte Carlo mean and second moment; trial k draws its signs from "mc/trial/k" """
    variable = Variable(variable)
    if trials < MIN_MC_TRIALS:
        raise ConfigError(f"Monte Carlo needs at least {MIN_MC_TRIALS} trials, got {trials}")
    form = bilinear_form(T, xfam, yfam, variable, indices)
    kx, ky = len(form.x_support), len(form.y_support)
    theta = np.empty((trials, kx), dtype=np.int64)
    eps = np.empty((trials, ky), dtype=np.int64)
    for k in range(trials):
        rng = derive_rng(seed, f"mc/trial/{k}")
        theta[k] = rademacher(rng, kx)
        eps[k] = rademacher(rng, ky)
    values = form.evaluate(theta, eps)
    squares = values ** 2
    if trace is not None:
        write_trace(trace, variable, indices, values)
    bound, norm, a = theorem_bound(T, xfam, yfam, variable, exponents)
    return MomentReport(
        variable=variable,
        indices=_index_labels(variable, indices),
        trials=trials,
        mean=float(values.mean()),
        second_moment=float(squares.mean()),
        stderr_mean=float(values.std(ddof=1) / math.sqrt(trials)),
        stderr_second=float(squares.std(ddof=1) / math.sqrt(trials)),
        bound=bound,
        norm_upper=norm,
        alpha=a,
        method=MomentMethod.MONTE_CARLO,
    )


TRACE_COLUMNS = ["trial", "variable", "I", "I_prime", "J", "J_prime", "value"]


def write_trace(stream: TextIO, variable: Variable, indices: VariableIndices, values: np.ndarray, header: bool = True):
    writer = csv.writer(stream, lineterminator="\n")
    if header:
        writer.writerow(TRACE_COLUMNS)
    labels = indices.labels()
    for k, value in enumerate(values):
        writer.writerow([k, Variable(variable).value, *labels, repr(float(value))])


# ==================== SIGN SEARCH ====================

class TailPrediction(BaseModel):
    """Chebyshev predictions for the bad events; informational only"""

    offdiag_event: float = Field(..., description="4Γ²/(2^{m0/2}η0²)")
    diag_event: float = Field(..., description="12Γ²/(2^{m0/2}η0²)")
    union_bound: float = Field(..., description="2^{4(n+3)}Γ²/(2^{m0/2}η0²)")
    informative: bool = Field(..., description="Whether the union bound is below 1")


def tail_predictions(gamma: float, m0: int, eta0: float, n: int) -> TailPrediction:
    if eta0 <= 0:
        return TailPrediction(offdiag_event=math.inf, diag_event=math.inf, union_bound=math.inf, informative=False)
    base = gamma ** 2 / (2.0 ** (m0 / 2.0) * eta0 ** 2)
    union = 2.0 ** (4 * (n + 3)) * base
    prediction = TailPrediction(
        offdiag_event=4 * base, diag_event=12 * base, union_bound=union, informative=union < 1
    )
    if not prediction.informative:
        logger.warning("Union tail bound %.3g ≥ 1 at m0=%d; acceptance is purely empirical", union, m0)
    return prediction


class SignSearchReport(BaseModel):
    accepted: bool
    attempts: int = Field(..., description="Attempts used: the accepted attempt's index + 1, or max_attempts")
    theta: Optional[Dict[str, int]] = None
    eps: Optional[Dict[str, int]] = None
    max_offdiag: float = Field(..., description="max over R ≠ R′ of |⟨T b_R, b_R′⟩| for the reported attempt")
    max_diag_deviation: float = Field(..., description="max over R of |⟨T b_R, b_R⟩ - Σ⟨T h_Q, h_Q⟩|")
    eta0: float
    best_attempt: int = Field(..., description="Index of the reported attempt")
    tail: Optional[TailPrediction] = None

    @model_validator(mode="after")
    def accepted_within_threshold(self) -> "SignSearchReport":
        if self.accepted and (self.max_offdiag > self.eta0 or self.max_diag_deviation > self.eta0):
            raise ValueError("an accepted search must meet eta0")
        return self

    def signs(self, resolution: int) -> Tuple[SignAssignment, SignAssignment]:
        if self.theta is None or self.eps is None:
            raise ConfigError("Search report carries no signs")
        return SignAssignment.from_dict(self.theta, resolution), SignAssignment.from_dict(self.eps, resolution)


class _SearchContext:
    """Gram restricted to support rectangles, with the per-block diagonal sums"""

    def __init__(self, T: OperatorMatrix, xfam: CollectionFamily, yfam: CollectionFamily):
        self.resolution = xfam.target_resolution
        self.x_support = xfam.support()
        self.y_support = yfam.support()
        self.system = build_system(xfam, yfam, validate=False)
        side = dimension(self.resolution)
        xpos = np.array([K.position for K in self.x_support], dtype=np.int64)
        ypos = np.array([L.position for L in self.y_support], dtype=np.int64)
        rows = (xpos[:, None] * side + ypos[None, :]).ravel()
        self.xpos, self.ypos = xpos, ypos
        self.gram = T.gram[np.ix_(rows, rows)]
        self.pattern = np.abs(self.system.coefficients[rows])
        self.diag_sums = self.pattern.T @ np.diag(self.gram)

    def evaluate(self, theta: SignAssignment, eps: SignAssignment) -> Tuple[float, float]:
        signs = np.kron(theta.values[self.xpos], eps.values[self.ypos]).astype(np.float64)
        signed = self.pattern * signs[:, None]
        block = signed.T @ self.gram @ signed
        diag = np.diag(block)
        offdiag = np.abs(block - np.diag(diag))
        return float(offdiag.max(initial=0.0)), float(np.abs(diag - self.diag_sums).max(initial=0.0))


def _attempt_signs(ctx: _SearchContext, seed: int, k: int) -> Tuple[SignAssignment, SignAssignment]:
    rng = derive_rng(seed, f"search/attempt/{k}")
    theta = SignAssignment.random(ctx.resolution, rng, ctx.x_support)
    eps = SignAssignment.random(ctx.resolution, rng, ctx.y_support)
    return theta, eps


def search_signs(
    T: OperatorMatrix,
    xfam: CollectionFamily,
    yfam: CollectionFamily,
    eta0: float,
    max_attempts: int,
    seed: int,
    threads: int = 1,
    batch_size: int = 16,
    gamma: Optional[float] = None,
    m0: Optional[int] = None,
) -> SignSearchReport:
    """
    Rejection sampling of (θ, ε) until every off-diagonal block pairing and every diagonal
    deviation is at most eta0. Attempts run in fixed batches and the first accepted index wins,
    so the result does not depend on the thread count.
    """
    if eta0 < 0:
        raise ConfigError(f"eta0 must be nonnegative, got {eta0}")
    if max_attempts < 1:
        raise ConfigError(f"max_attempts must be at least 1, got {max_attempts}")
    if not T.is_square or T.domain.resolution != xfam.target_resolution:
        raise ResolutionError(
            f"Operator on N={T.domain.resolution} does not act on the families' N={xfam.target_resolution}"
        )
    ctx = _SearchContext(T, xfam, yfam)

    def run(k: int):
        theta, eps = _attempt_signs(ctx, seed, k)
        offdiag, deviation = ctx.evaluate(theta, eps)
        return k, theta, eps, offdiag, deviation

    best = None
    accepted = None
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for start in range(0, max_attempts, batch_size):
            indices = range(start, min(start + batch_size, max_attempts))
            for k, theta, eps, offdiag, deviation in pool.map(run, indices):
                logger.debug("attempt %d: offdiag %.3g, diag deviation %.3g", k, offdiag, deviation)
                if best is None or max(offdiag, deviation) < max(best[3], best[4]):
                    best = (k, theta, eps, offdiag, deviation)
                if accepted is None and offdiag <= eta0 and deviation <= eta0:
                    accepted = (k, theta, eps, offdiag, deviation)
            if accepted is not None:
                break

    tail = None
    if gamma is not None and m0 is not None:
        tail = tail_predictions(gamma, m0, eta0, xfam.domain_resolution)
    if accepted is not None:
        k, theta, eps, offdiag, deviation = accepted
        logger.info("Signs accepted on attempt %d (offdiag %.3g, deviation %.3g)", k + 1, offdiag, deviation)
        return SignSearchReport(
            accepted=True, attempts=k + 1, theta=theta.to_dict(), eps=eps.to_dict(),
            max_offdiag=offdiag, max_diag_deviation=deviation, eta0=eta0, best_attempt=k, tail=tail,
        )
    k, theta, eps, offdiag, deviation = best
    logger.info("No signs accepted in %d attempts; best maxima %.3g / %.3g", max_attempts, offdiag, deviation)
    return SignSearchReport(
        accepted=False, attempts=max_attempts, theta=theta.to_dict(), eps=eps.to_dict(),
        max_offdiag=offdiag, max_diag_deviation=deviation, eta0=eta0, best_attempt=k, tail=tail,
    )


def block_maxima(
    T: OperatorMatrix, xfam: CollectionFamily, yfam: CollectionFamily, theta: SignAssignment, eps: SignAssignment
) -> Tuple[float, float]:
    """(max off-diagonal, max diagonal deviation) for given signs"""
    return _SearchContext(T, xfam, yfam).evaluate(theta, eps)


class SweepPoint(BaseModel):
    m0: int
    runs: int
    accepted: int
    rate: float
    mean_attempts: Optional[float] = Field(None, description="Mean attempts over accepted runs")


def acceptance_sweep(
    T: OperatorMatrix,
    n: int,
    m0_values: Iterable[int],
    eta0: float,
    runs: int,
    max_attempts: int,
    seed: int,
    threads: int = 1,
) -> List[SweepPoint]:
    """Empirical acceptance rate of the sign search over Gamlen-Gaudet families, per m0"""
    if runs < 1:
        raise ConfigError(f"runs must be at least 1, got {runs}")
    points = []
    N = T.domain.resolution
    for m0 in m0_values:
        xfam, yfam = gamlen_gaudet(n, m0, N, max_resolution=max(N, n + m0))
        attempts = []
        for r in range(runs):
            report = search_signs(T, xfam, yfam, eta0, max_attempts, derive_seed(seed, f"sweep/{m0}/{r}"), threads)
            if report.accepted:
                attempts.append(report.attempts)
        points.append(SweepPoint(
            m0=m0,
            runs=runs,
            accepted=len(attempts),
            rate=len(attempts) / runs,
            mean_attempts=float(np.mean(attempts)) if attempts else None,
        ))
        logger.info("m0=%d: acceptance %d/%d", m0, len(attempts), runs)
    return points
