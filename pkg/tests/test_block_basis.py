import numpy as np
import pytest

from config import CONTRACTION_MARGIN, PROJECTION_TOLERANCE
from conftest import random_disjoint_collection
from dyadic import DyadicInterval, DyadicRectangle, UNIT_SQUARE, enumerate_basis, rectangle_measures
from errors import ConfigError, InvalidFamilyError, ResolutionError
from haar_space import (
    EUCLIDEAN,
    ExponentPair,
    HardyElement,
    Side,
    block_function,
    block_norm_closed_form,
    dual_norm_lower_bound,
    l2_inner,
    mixed_norms,
)
from jones_collections import CollectionFamily, gamlen_gaudet, identity_family
from block_basis import (
    BlockBasisSystem,
    SignAssignment,
    build_system,
    collection_matrix,
    operator_A,
    operator_B,
    projection_P,
)
from seeding import derive_rng

EXPONENTS = [
    ExponentPair(p=1.0, q=1.0),
    ExponentPair(p=1.0, q=2.0),
    ExponentPair(p=2.0, q=2.0),
    ExponentPair(p=3.0, q=1.5),
]


def random_system(n, m0, seed):
    xfam, yfam = gamlen_gaudet(n, m0)
    N = xfam.target_resolution
    theta = SignAssignment.random(N, derive_rng(seed, "theta"))
    eps = SignAssignment.random(N, derive_rng(seed, "eps"))
    return build_system(xfam, yfam, theta, eps)


def check_projection_theorem(sys, rng, samples=100):
    B, A, P = operator_B(sys), operator_A(sys), projection_P(sys)
    small = B.domain.dim
    assert np.abs(A.action @ B.action - np.eye(small)).max() <= 1e-12
    assert np.abs(P.action @ P.action - P.action).max() <= PROJECTION_TOLERANCE
    inputs = rng.standard_normal((samples, small))
    large = rng.standard_normal((samples, A.domain.dim))
    n, N = sys.domain_resolution, sys.target_resolution
    for exponents in EXPONENTS:
        norms_in = mixed_norms(inputs, n, exponents)
        norms_out = mixed_norms(inputs @ B.action.T, N, exponents)
        assert np.allclose(norms_out, norms_in, rtol=1e-10, atol=0)
        norms_large = mixed_norms(large, N, exponents)
        assert np.all(mixed_norms(large @ A.action.T, n, exponents) <= norms_large + CONTRACTION_MARGIN)
        assert np.all(mixed_norms(large @ P.action.T, N, exponents) <= norms_large + CONTRACTION_MARGIN)


def random_signs(rng, intervals):
    return {I: int(s) for I, s in zip(intervals, rng.choice([-1, 1], size=len(intervals)))}


def random_block_functional(rng, resolution):
    xs = random_disjoint_collection(rng, resolution)
    ys = random_disjoint_collection(rng, resolution)
    return xs, ys, block_function(xs, ys, resolution, random_signs(rng, xs), random_signs(rng, ys))


def check_dual_projection(sys, rng, samples=10, trials=50):
    """A* is isometric on block functionals of V_n*; P* and B* do not increase dual norms"""
    A_star = operator_A(sys).adjoint()
    B_star = operator_B(sys).adjoint()
    P_star = projection_P(sys).adjoint()
    n, N = sys.domain_resolution, sys.target_resolution
    for k in range(samples):
        xs, ys, g = random_block_functional(rng, n)
        lifted = HardyElement(N, A_star.action @ g.coefficients)
        xl, yl, h = random_block_functional(rng, N)
        projected = HardyElement(N, P_star.action @ h.coefficients)
        restricted = HardyElement(n, B_star.action @ h.coefficients)
        for exponents in EXPONENTS:
            expected = block_norm_closed_form(xs, ys, exponents, Side.DUAL)
            assert dual_norm_lower_bound(lifted, exponents, trials, seed=k) == pytest.approx(expected, rel=1e-9)
            bound = block_norm_closed_form(xl, yl, exponents, Side.DUAL) * (1 + 1e-9)
            assert dual_norm_lower_bound(projected, exponents, trials, seed=k) <= bound
            assert dual_norm_lower_bound(restricted, exponents, trials, seed=k) <= bound


class TestSignAssignment:
    """Sign vectors on 𝒟_{≤N}"""

    def test_values_must_be_signs(self):
        """Only ±1 values of the right length are accepted"""
        with pytest.raises(ConfigError):
            SignAssignment(1, [1, 0, 1])
        with pytest.raises(ResolutionError):
            SignAssignment(1, [1, 1])

    def test_random_respects_support(self):
        """Intervals outside the support keep the sign +1"""
        support = [DyadicInterval(2, 1), DyadicInterval(2, 2)]
        signs = SignAssignment.random(2, derive_rng(0, "signs"), support)
        outside = [I for I in signs.as_mapping() if I not in support]
        assert all(signs[I] == 1 for I in outside)

    def test_random_is_seeded(self):
        """Random signs repeat under the same generator path"""
        first = SignAssignment.random(3, derive_rng(4, "theta"))
        assert first == SignAssignment.random(3, derive_rng(4, "theta"))

    def test_flip_and_round_trip(self):
        """Flipping one sign survives a dictionary round trip"""
        signs = SignAssignment.ones(2).flipped(DyadicInterval(1, 1))
        assert signs[DyadicInterval(1, 1)] == -1
        assert SignAssignment.from_dict(signs.to_dict(), 2) == signs

    def test_partial_dictionary(self):
        """Sign dictionaries must cover every interval"""
        with pytest.raises(ConfigError):
            SignAssignment.from_dict({"0:0": 1}, 1)

    def test_malformed_dictionary(self):
        """Non-numeric signs and non-mapping input are configuration errors"""
        data = SignAssignment.ones(1).to_dict()
        with pytest.raises(ConfigError):
            SignAssignment.from_dict(dict(data, **{"0:0": "plus"}), 1)
        with pytest.raises(ConfigError):
            SignAssignment.from_dict(["0:0"], 1)
        system = random_system(1, 1, seed=0).to_dict()
        system["theta"] = dict(system["theta"], **{"1:0": "minus"})
        with pytest.raises(ConfigError):
            BlockBasisSystem.from_dict(system)


class TestBlockElements:
    """b_R = f_I ⊗ g_J"""

    def test_unit_element_of_smallest_construction(self):
        """b for the unit square is the sum over level-one rectangles"""
        sys = build_system(*gamlen_gaudet(1, 1))
        b = sys.element(UNIT_SQUARE)
        level_one = [DyadicInterval(1, 0), DyadicInterval(1, 1)]
        expected = {DyadicRectangle(K, L) for K in level_one for L in level_one}
        support = {rect for rect in enumerate_basis(2) if b.coefficient(rect) != 0}
        assert support == expected
        assert all(b.coefficient(rect) == 1.0 for rect in expected)

    def test_identity_family_gives_haar_basis(self):
        """Singleton collections give back the Haar basis"""
        sys = build_system(identity_family(2), identity_family(2))
        B = operator_B(sys)
        assert np.array_equal(B.action, np.eye(49))

    def test_larger_target_embeds_haar_basis(self):
        """Singleton collections embed into a larger target resolution"""
        sys = build_system(identity_family(1, 2), identity_family(1, 2))
        for rect, element in sys.elements.items():
            assert np.array_equal(element.coefficients, HardyElement.basis_vector(rect, 2).coefficients)

    @pytest.mark.parametrize("n,m0", [(0, 2), (1, 1), (2, 1), (1, 2)])
    def test_biorthogonal(self, n, m0):
        """Block elements are orthogonal with squared norms |R|"""
        sys = random_system(n, m0, seed=n * 10 + m0)
        rects = list(sys.elements)
        for R in rects:
            assert sys.squared_norms[enumerate_basis(n).position(R)] == float(R.measure)
        for R in rects[:5]:
            for S in rects:
                expected = float(R.measure) if R == S else 0.0
                assert l2_inner(sys.element(R), sys.element(S)) == expected

    def test_sign_flip_changes_only_matching_rows(self):
        """Flipping θ_K negates exactly the rows of K"""
        sys = random_system(1, 1, seed=3)
        K = DyadicInterval(2, 1)
        flipped = sys.with_signs(sys.theta.flipped(K), sys.eps)
        side = 7
        changed = np.flatnonzero(np.any(flipped.coefficients != sys.coefficients, axis=1))
        assert all(row // side == K.position for row in changed)
        assert np.array_equal(flipped.coefficients[changed], -sys.coefficients[changed])

    def test_collection_matrix_checks_resolution(self):
        """Signs at another resolution are rejected"""
        xfam, _ = gamlen_gaudet(1, 1)
        with pytest.raises(ResolutionError):
            collection_matrix(xfam, SignAssignment.ones(3))

    def test_round_trip(self):
        """Block systems survive a dictionary round trip"""
        sys = random_system(1, 1, seed=9)
        restored = BlockBasisSystem.from_dict(sys.to_dict())
        assert np.array_equal(restored.coefficients, sys.coefficients)


class TestValidation:
    """Families are checked before use"""

    def test_invalid_family(self):
        """Families failing the Jones conditions are refused unless validation is off"""
        naive = CollectionFamily.from_dict({"n": 1, "N": 2, "assignments": {
            "0:0": ["1:0", "1:1"], "1:0": ["2:0", "2:1"], "1:1": ["2:2", "2:3"],
        }})
        with pytest.raises(InvalidFamilyError) as raised:
            build_system(naive, naive)
        assert "J4" in raised.value.report.tags()
        assert build_system(naive, naive, validate=False).coefficients.shape == (49, 9)

    def test_resolutions_must_match(self):
        """Both families need the same resolutions"""
        xfam, _ = gamlen_gaudet(1, 1)
        _, yfam = gamlen_gaudet(1, 2)
        with pytest.raises(ResolutionError):
            build_system(xfam, yfam)


class TestProjection:
    """A·B = Id, P² = P, B isometric, A and P contractive"""

    def test_small_systems(self, rng):
        """Projection identities on a few small systems"""
        for seed in range(3):
            check_projection_theorem(random_system(1, 1, seed), rng)
            check_projection_theorem(random_system(2, 1, seed), rng, samples=30)

    @pytest.mark.slow
    @pytest.mark.parametrize("n", [0, 1, 2])
    @pytest.mark.parametrize("m0", [0, 1, 2])
    def test_full_grid(self, n, m0, rng):
        """Projection identities over fifty sign draws per (n, m0)"""
        for seed in range(50):
            check_projection_theorem(random_system(n, m0, seed), rng)

    def test_dual_small_systems(self, rng):
        """Adjoints act on dual block functionals as the primal operators act on blocks"""
        for seed in range(3):
            check_dual_projection(random_system(1, 1, seed), rng)
        check_dual_projection(random_system(2, 1, seed=0), rng, samples=5)

    @pytest.mark.slow
    @pytest.mark.parametrize("n", [0, 1, 2])
    @pytest.mark.parametrize("m0", [0, 1, 2])
    def test_dual_full_grid(self, n, m0, rng):
        """Dual projection identities over fifty sign draws per (n, m0)"""
        for seed in range(50):
            check_dual_projection(random_system(n, m0, seed), rng)

    def test_adjoint_identities(self):
        """B* and A are the same operator, and so are A* and B"""
        sys = random_system(1, 2, seed=5)
        B, A = operator_B(sys), operator_A(sys)
        assert np.allclose(B.adjoint().gram, A.gram, rtol=0, atol=1e-15)
        assert np.allclose(A.adjoint().gram, B.gram, rtol=0, atol=1e-15)

    def test_a_inverts_block_elements(self):
        """A maps b_R to h_R"""
        sys = random_system(1, 1, seed=1)
        A = operator_A(sys)
        basis = enumerate_basis(1)
        for k, rect in enumerate(basis):
            image = A.action @ sys.element(rect).coefficients
            assert np.allclose(image, np.eye(9)[k], atol=1e-12)

    def test_projection_fixes_block_span(self, rng):
        """P fixes every combination of block elements"""
        sys = random_system(1, 1, seed=2)
        P = projection_P(sys)
        f = sys.coefficients @ rng.standard_normal(9)
        assert np.allclose(P.action @ f, f, atol=1e-12)

    def test_measures_weight_a(self):
        """A on singleton collections is the measure-weighted identity"""
        sys = build_system(identity_family(1), identity_family(1))
        A = operator_A(sys)
        assert np.array_equal(A.gram, np.diag(rectangle_measures(1)))
        assert operator_B(sys, EUCLIDEAN).domain.resolution == 1
