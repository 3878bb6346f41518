import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvlab import linalg
from kvlab.errors import ConfigError, DimensionError


def rng(seed):
    return np.random.default_rng(seed)


class TestSampleOrthogonal:
    def test_one_by_one(self):
        q = linalg.sample_orthogonal(1, rng(0))
        assert q.shape == (1, 1)
        assert abs(abs(q[0, 0]) - 1.0) < 1e-12

    @pytest.mark.parametrize("n", [2, 8, 64, 256])
    def test_orthogonality(self, n):
        q = linalg.sample_orthogonal(n, rng(7))
        err = np.max(np.abs(q.T @ q - np.eye(n)))
        assert err <= 1e-12

    def test_deterministic(self):
        a = linalg.sample_orthogonal(8, rng(7))
        b = linalg.sample_orthogonal(8, rng(7))
        assert np.array_equal(a, b)

    def test_zero_dim_rejected(self):
        with pytest.raises(DimensionError):
            linalg.sample_orthogonal(0, rng(0))


class TestRopeMatrix:
    def test_position_zero_is_identity(self):
        assert np.allclose(linalg.rope_matrix(8, 0), np.eye(8), atol=0)

    def test_d2_pos1_direct(self):
        # with d=2 the single frequency is base^0 = 1
        r = linalg.rope_matrix(2, 1, base=10000.0)
        expected = np.array([[np.cos(1.0), -np.sin(1.0)], [np.sin(1.0), np.cos(1.0)]])
        assert np.allclose(r, expected, atol=1e-15)

    @pytest.mark.parametrize("d,pos", [(2, 3), (8, 1), (16, 127), (64, 9)])
    def test_rotation_is_orthogonal(self, d, pos):
        r = linalg.rope_matrix(d, pos)
        assert np.max(np.abs(r @ r.T - np.eye(d))) <= 1e-12

    def test_odd_dim_rejected(self):
        with pytest.raises(DimensionError):
            linalg.rope_matrix(5, 1)

    @pytest.mark.parametrize("pos", [0, 1, 5, 31])
    def test_apply_rotation_matches_matrix(self, pos):
        d = 16
        x = rng(3).standard_normal((4, d))
        direct = x @ linalg.rope_matrix(d, pos)
        fast = linalg.apply_rotation(x, pos)
        assert np.max(np.abs(direct - fast)) <= 1e-12


class TestCommutingKey:
    def test_unit_key_is_identity(self):
        key = linalg.RotationScalingKey(np.ones(4), np.zeros(4), (0.5, 2.0))
        assert np.array_equal(linalg.materialize(key), np.eye(8))

    def test_commutes_with_rotations(self):
        # oracle: multiply both orders explicitly
        key = linalg.make_commuting_key(8, rng(3))
        m = linalg.materialize(key)
        for pos in (0, 1, 5, 127):
            r = linalg.rope_matrix(8, pos)
            assert np.max(np.abs(m @ r - r @ m)) <= 1e-12

    def test_inverse_key(self):
        key = linalg.make_commuting_key(8, rng(3))
        m = linalg.materialize(key)
        minv = linalg.materialize(linalg.invert_key(key))
        assert np.max(np.abs(m @ minv - np.eye(8))) <= 1e-10

    def test_block_structure(self):
        key = linalg.make_commuting_key(4, rng(11))
        m = linalg.materialize(key)
        mask = np.zeros((4, 4), dtype=bool)
        idx = np.arange(2)
        for rr, cc in [(idx, idx), (idx, idx + 2), (idx + 2, idx), (idx + 2, idx + 2)]:
            mask[rr, cc] = True
        assert np.all(m[~mask] == 0.0)

    def test_scales_within_bounds(self):
        key = linalg.make_commuting_key(32, rng(5), (0.5, 2.0))
        assert np.all(key.scales >= 0.5) and np.all(key.scales <= 2.0)

    def test_dense_control_does_not_commute(self):
        # guards against a vacuous commutativity test
        m = rng(0).standard_normal((8, 8))
        r = linalg.rope_matrix(8, 5)
        assert np.max(np.abs(m @ r - r @ m)) > 1e-3

    def test_degenerate_block_rejected(self):
        with pytest.raises(ConfigError):
            linalg.RotationScalingKey(np.array([1.0, 0.0]), np.array([0.0, 0.0]))

    def test_empty_bounds_rejected(self):
        with pytest.raises(ConfigError):
            linalg.make_commuting_key(8, rng(0), (2.0, 0.5))

    @given(st.integers(min_value=1, max_value=16), st.integers(min_value=0, max_value=500))
    @settings(max_examples=60, deadline=None)
    def test_commutativity_property(self, half, pos):
        d = 2 * half
        key = linalg.make_commuting_key(d, rng(half * 1000 + pos))
        m = linalg.materialize(key)
        r = linalg.rope_matrix(d, pos)
        assert np.max(np.abs(m @ r - r @ m)) <= 1e-12


class TestPermutation:
    def test_size_one_is_identity(self):
        p = linalg.sample_permutation(1, rng(0))
        assert p.mapping.tolist() == [0]

    def test_group_roundtrip_exact(self):
        p = linalg.sample_permutation(16, rng(4))
        x = rng(5).standard_normal((16, 3))
        back = linalg.apply_rows(p, linalg.apply_rows(linalg.inverse(p), x))
        assert np.array_equal(back, x)

    def test_deterministic(self):
        a = linalg.sample_permutation(16, rng(11))
        b = linalg.sample_permutation(16, rng(11))
        assert np.array_equal(a.mapping, b.mapping)

    def test_matrix_agrees_with_apply_rows(self):
        p = linalg.sample_permutation(8, rng(2))
        x = rng(3).standard_normal((8, 5))
        assert np.array_equal(p.to_matrix() @ x, linalg.apply_rows(p, x))

    def test_size_mismatch(self):
        p = linalg.sample_permutation(8, rng(2))
        with pytest.raises(DimensionError):
            linalg.apply_rows(p, np.zeros((9, 2)))

    def test_apply_rows_is_linear(self):
        p = linalg.sample_permutation(8, rng(9))
        x = rng(1).standard_normal((8, 4))
        y = rng(2).standard_normal((8, 4))
        lhs = linalg.apply_rows(p, 2.0 * x + 3.0 * y)
        rhs = 2.0 * linalg.apply_rows(p, x) + 3.0 * linalg.apply_rows(p, y)
        assert np.array_equal(lhs, rhs)


class TestLeastSquares:
    def test_square_invertible(self):
        a = rng(0).standard_normal((6, 6))
        b = rng(1).standard_normal((6, 2))
        sol = linalg.solve_least_squares(a, b)
        assert not sol.rank_deficient
        assert np.max(np.abs(sol.x - np.linalg.solve(a, b))) <= 1e-8

    def test_mean_of_residuals(self):
        sol = linalg.solve_least_squares(np.array([[1.0], [1.0]]), np.array([[0.0], [2.0]]))
        assert np.allclose(sol.x, [[1.0]])

    def test_recovers_constructed_solution(self):
        # construct-then-solve oracle
        g = rng(42)
        a = g.standard_normal((12, 8))
        x0 = g.standard_normal((8, 3))
        sol = linalg.solve_least_squares(a, a @ x0)
        assert not sol.rank_deficient
        assert np.max(np.abs(sol.x - x0)) <= 1e-8

    def test_rank_deficient_flagged_min_norm(self):
        a = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        b = np.array([[1.0], [2.0], [3.0]])
        sol = linalg.solve_least_squares(a, b)
        assert sol.rank_deficient and sol.rank == 1
        assert np.allclose(sol.x, np.linalg.pinv(a) @ b)

    def test_empty_rejected(self):
        with pytest.raises(DimensionError):
            linalg.solve_least_squares(np.zeros((0, 2)), np.zeros((0, 1)))
