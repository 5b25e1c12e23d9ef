import json

import numpy as np
import pytest

from config import GRAM_MAGIC
from dyadic import enumerate_basis, intervals_up_to, rectangle_measures
from errors import ConfigError, DegenerateDiagonalError, DimensionMismatchError, GenerationError
from haar_space import EUCLIDEAN, ExponentPair, HardyElement, Side, SpaceDescriptor, l2_inner, mixed_norm
from operators import (
    GRAM_HEADER,
    NormMethod,
    OperatorMatrix,
    OperatorStructure,
    _sampled_lower,
    apply,
    certified_norm_upper,
    diagonal,
    diagonal_multipliers,
    generate_test_operator,
    has_large_diagonal,
    multiplication_M,
    norm_estimate,
    spectral_norm,
    subtree_swap,
    triangle_bound,
)
from seeding import derive_rng

SKEWED = ExponentPair(p=3.0, q=1.5)


def random_operator(rng, N=1, exponents=EUCLIDEAN):
    space = SpaceDescriptor(resolution=N, exponents=exponents)
    return OperatorMatrix(space, space, rng.standard_normal((space.dim, space.dim)))


class TestOperatorMatrix:
    """Gram storage and the coefficient action"""

    def test_identity_action(self, rng):
        """Identity and zero act as expected on coefficients"""
        f = HardyElement(2, rng.standard_normal(49))
        I = OperatorMatrix.identity(2)
        assert np.array_equal(apply(I, f).coefficients, f.coefficients)
        assert np.array_equal(I.action, np.eye(49))
        assert apply(OperatorMatrix.zero(2), f).is_zero()

    def test_gram_is_pairing(self, rng):
        """Gram entries are the pairings ⟨T h_Q, h_Q′⟩"""
        T = random_operator(rng, N=2)
        basis = enumerate_basis(2)
        f = HardyElement(2, rng.standard_normal(49))
        image = apply(T, f)
        for k in (0, 5, 17, 48):
            h = HardyElement.basis_vector(basis[k], 2)
            assert l2_inner(image, h) == pytest.approx(T.gram[k] @ f.coefficients, rel=1e-12)

    def test_apply_is_linear(self, rng):
        """Application is linear"""
        T = random_operator(rng)
        f = HardyElement(1, rng.standard_normal(9))
        g = HardyElement(1, rng.standard_normal(9))
        combined = apply(T, 2.0 * f + g).coefficients
        assert np.allclose(combined, 2.0 * apply(T, f).coefficients + apply(T, g).coefficients)

    def test_shape_checked(self):
        """Mismatched shapes and resolutions are rejected"""
        space = SpaceDescriptor(resolution=1)
        with pytest.raises(DimensionMismatchError):
            OperatorMatrix(space, space, np.zeros((9, 8)))
        with pytest.raises(DimensionMismatchError):
            apply(OperatorMatrix.identity(1), HardyElement.zero(2))

    def test_compose(self, rng):
        """Composition matches repeated application"""
        T = random_operator(rng)
        S = random_operator(rng)
        I = OperatorMatrix.identity(1)
        assert np.allclose((T @ I).gram, T.gram)
        assert np.allclose((I @ T).gram, T.gram)
        f = HardyElement(1, rng.standard_normal(9))
        assert np.allclose(apply(S @ T, f).coefficients, apply(S, apply(T, f)).coefficients)
        with pytest.raises(DimensionMismatchError):
            OperatorMatrix.identity(2) @ T

    def test_adjoint(self, rng):
        """The adjoint transposes the Gram matrix and moves to the dual side"""
        T = random_operator(rng)
        adjoint = T.adjoint()
        assert adjoint.domain.side == Side.DUAL
        assert np.array_equal(adjoint.gram, T.gram.T)
        f = HardyElement(1, rng.standard_normal(9))
        g = HardyElement(1, rng.standard_normal(9))
        assert l2_inner(apply(adjoint, g), f) == pytest.approx(l2_inner(g, apply(T, f)), rel=1e-12)
        assert np.array_equal(adjoint.adjoint().gram, T.gram)


class TestDiagonal:
    """Diagonal entries and the sign multiplier"""

    def test_identity_diagonal(self):
        """The identity has diagonal |Q| and ratio one"""
        values = diagonal(OperatorMatrix.identity(1))
        assert all(value == float(rect.measure) for rect, value in values.items())
        assert has_large_diagonal(OperatorMatrix.identity(1), 1.0).holds
        check = has_large_diagonal(OperatorMatrix.identity(1), 1.01)
        assert not check.holds
        assert check.worst_ratio == 1.0

    def test_diagonal_matches_pairing(self, rng):
        """Diagonal entries match the L² pairing"""
        T = random_operator(rng)
        for rect, value in diagonal(T).items():
            h = HardyElement.basis_vector(rect, 1)
            assert value == pytest.approx(l2_inner(apply(T, h), h), rel=1e-12)

    def test_sign_multiplier(self, rng):
        """T·M has the absolute diagonal of T"""
        T = random_operator(rng)
        M = multiplication_M(T)
        assert M.is_diagonal()
        assert np.array_equal(diagonal_multipliers(T @ M), np.abs(diagonal_multipliers(T)))
        assert np.array_equal(diagonal_multipliers(M), np.sign(diagonal_multipliers(T)))

    def test_negative_identity(self):
        """The sign multiplier of -Id is -Id"""
        minus = OperatorMatrix.identity(1).scaled(-1)
        M = multiplication_M(minus)
        assert np.array_equal(M.gram, minus.gram)
        assert np.array_equal((minus @ M).gram, OperatorMatrix.identity(1).gram)

    def test_zero_diagonal(self):
        """A zero diagonal entry has no sign"""
        with pytest.raises(DegenerateDiagonalError):
            multiplication_M(OperatorMatrix.zero(1))


class TestNorms:
    """Certified bounds and sampled witnesses"""

    def test_identity(self):
        """The identity has spectral norm one"""
        estimate = norm_estimate(OperatorMatrix.identity(2))
        assert estimate.method == NormMethod.SPECTRAL
        assert estimate.lower == pytest.approx(1.0)
        assert estimate.upper == pytest.approx(1.0)

    @pytest.mark.parametrize("exponents", [EUCLIDEAN, SKEWED, ExponentPair(p=1.0, q=1.0)], ids=str)
    def test_scaled_identity(self, exponents):
        """Scaled identities have exact norms in every exponent pair"""
        T = OperatorMatrix.identity(1, exponents).scaled(0.5)
        estimate = norm_estimate(T, exponents)
        assert estimate.lower == pytest.approx(0.5)
        assert estimate.upper == pytest.approx(0.5)

    def test_spectral_norm_dominates_samples(self, rng):
        """Sampled lower bound ≤ spectral norm ≤ triangle bound"""
        T = random_operator(rng, N=2)
        lower, _ = _sampled_lower(T, EUCLIDEAN, 100, 0)
        assert lower <= spectral_norm(T) * (1 + 1e-12)
        assert spectral_norm(T) <= triangle_bound(T, EUCLIDEAN) * (1 + 1e-12)

    def test_sampled_estimate(self, rng):
        """Sampled estimates come with an attained witness"""
        T = random_operator(rng, exponents=SKEWED)
        estimate = norm_estimate(T, samples=50, seed=3)
        assert estimate.method == NormMethod.SAMPLED
        assert 0 < estimate.lower <= estimate.upper
        # The witness bound is attained by an actual vector
        f = HardyElement(1, np.eye(9)[0])
        assert mixed_norm(apply(T, f), SKEWED) / mixed_norm(f, SKEWED) <= estimate.lower * (1 + 1e-12)

    def test_sampled_estimate_is_seeded(self, rng):
        """Sampled estimates repeat under the same seed"""
        T = random_operator(rng, exponents=SKEWED)
        assert norm_estimate(T, samples=20, seed=5) == norm_estimate(T, samples=20, seed=5)


class TestGenerator:
    """Random operators meeting diagonal and norm bounds"""

    def test_diagonal_identity(self):
        """δ = Γ = 1 gives the identity"""
        T = generate_test_operator(2, 1.0, 1.0, structure=OperatorStructure.DIAGONAL)
        assert np.array_equal(T.gram, OperatorMatrix.identity(2).gram)

    def test_infeasible(self):
        """δ > Γ and δ ≤ 0 are rejected"""
        with pytest.raises(GenerationError):
            generate_test_operator(1, 1.0, 0.5)
        with pytest.raises(ConfigError):
            generate_test_operator(1, 0.0, 0.5)

    @pytest.mark.parametrize("structure", list(OperatorStructure))
    def test_bounds_hold(self, structure):
        """Every structure meets the diagonal and norm bounds"""
        T = generate_test_operator(2, 0.5, 1.0, structure=structure, seed=7)
        assert has_large_diagonal(T, 0.5).holds
        assert spectral_norm(T) <= 1.0 + 1e-12

    def test_non_euclidean_certificate(self):
        """Non-Euclidean operators keep their exponents and diagonal"""
        T = generate_test_operator(1, 0.5, 1.0, exponents=SKEWED, seed=2)
        assert T.domain.exponents == SKEWED
        assert has_large_diagonal(T, 0.5).holds

    def test_mixed_signs(self):
        """Mixed signs keep the diagonal magnitude"""
        T = generate_test_operator(2, 0.5, 1.0, structure=OperatorStructure.DIAGONAL, seed=1, mixed_signs=True)
        multipliers = diagonal_multipliers(T)
        assert np.any(multipliers < 0) and np.any(multipliers > 0)
        assert np.all(np.abs(multipliers) >= 0.5)

    def test_deterministic(self):
        """Generation is a function of the seed"""
        first = generate_test_operator(2, 0.5, 1.0, seed=11)
        second = generate_test_operator(2, 0.5, 1.0, seed=11)
        assert np.array_equal(first.gram, second.gram)
        assert not np.array_equal(first.gram, generate_test_operator(2, 0.5, 1.0, seed=12).gram)

    def test_subtree_swap(self):
        """The permutation keeps levels and carries children onto children"""
        perm = subtree_swap(3, derive_rng(0, "swap"))
        intervals = intervals_up_to(3)
        by_position = {I.position: I for I in intervals}
        assert sorted(perm) == list(range(len(intervals)))
        assert perm[0] == 0
        assert (perm[1], perm[2]) == (2, 1)
        for I in intervals[:7]:
            image = by_position[perm[I.position]]
            assert image.level == I.level
            children = {by_position[perm[K.position]] for K in I.split()}
            assert children == set(image.split())

    def test_permuted_blocks_keep_rectangle_shape(self):
        """Each coupling entry links rectangles of equal side lengths"""
        T = generate_test_operator(2, 0.5, 1.0, structure=OperatorStructure.PERMUTED, seed=3)
        basis = enumerate_basis(2)
        off = T.action - np.diag(np.diag(T.action))
        rows, cols = np.nonzero(off)
        assert rows.size > 0
        for row, col in zip(rows, cols):
            assert basis[row].x.level == basis[col].x.level
            assert basis[row].y.level == basis[col].y.level
        assert np.count_nonzero(off, axis=0).max() == 1

    def test_certified_upper(self):
        """The Euclidean certificate is the spectral norm"""
        T = generate_test_operator(1, 0.5, 1.0, seed=4)
        assert certified_norm_upper(T, EUCLIDEAN) == pytest.approx(spectral_norm(T))


class TestSerialization:
    """JSON and binary dumps"""

    def test_binary_dump(self, rng):
        """Binary dumps carry the header and restore the Gram matrix"""
        T = random_operator(rng)
        payload = T.to_bytes()
        assert payload[:4] == GRAM_MAGIC
        assert len(payload) == GRAM_HEADER.size + 81 * 8
        restored = OperatorMatrix.from_bytes(payload)
        assert np.array_equal(restored.gram, T.gram)
        assert GRAM_HEADER.unpack_from(payload)[3] == 0

    def test_binary_dump_keeps_dual_side(self, rng):
        """Adjoints are dumped with side code 1 and restored on the dual side"""
        T = random_operator(rng).adjoint()
        payload = T.to_bytes()
        assert GRAM_HEADER.unpack_from(payload) == (GRAM_MAGIC, 1, 1, 1)
        restored = OperatorMatrix.from_bytes(payload)
        assert restored.domain.side == Side.DUAL
        assert restored.codomain.side == Side.DUAL
        assert np.array_equal(restored.gram, T.gram)

    def test_binary_dump_rejects_unknown_side(self, rng):
        """Side codes other than 0 and 1 are rejected"""
        payload = random_operator(rng).to_bytes()
        header = GRAM_HEADER.pack(GRAM_MAGIC, 1, 1, 2)
        with pytest.raises(ConfigError):
            OperatorMatrix.from_bytes(header + payload[GRAM_HEADER.size:])

    def test_binary_dump_rejects_bad_input(self, rng):
        """Bad magic and truncated payloads are rejected"""
        payload = random_operator(rng).to_bytes()
        with pytest.raises(ConfigError):
            OperatorMatrix.from_bytes(b"XXXX" + payload[4:])
        with pytest.raises(ConfigError):
            OperatorMatrix.from_bytes(payload[:-8])
        with pytest.raises(ConfigError):
            OperatorMatrix.from_bytes(payload[:8])

    def test_json_dump(self, rng):
        """JSON dumps restore the Gram matrix and the domain"""
        T = random_operator(rng, exponents=SKEWED)
        data = json.loads(T.to_json())
        assert data["kind"] == "operator"
        restored = OperatorMatrix.from_dict(data)
        assert np.array_equal(restored.gram, T.gram)
        assert restored.domain == T.domain

    def test_json_rejects_unknown_order(self, rng):
        """Unknown basis orders and incomplete records are rejected"""
        data = random_operator(rng).to_dict()
        data["order"] = "other"
        with pytest.raises(ConfigError):
            OperatorMatrix.from_dict(data)
        with pytest.raises(ConfigError):
            OperatorMatrix.from_dict({"domain": {}})

    def test_measures_used_for_action(self, rng):
        """Action is the Gram matrix divided by row measures"""
        T = random_operator(rng)
        assert np.allclose(T.action * rectangle_measures(1)[:, None], T.gram)
