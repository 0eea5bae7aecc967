import itertools
import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kprnn.kron import (KroneckerChain, KroneckerPair, KronShapeError, compression_ratio, divisors,
                        kp_expand, kp_expand_chain, kp_flops, kp_matvec, kp_matvec_chain,
                        plan_factor_shapes, prime_factorize)


def brute_kron(B, C):
    # element-by-element construction straight from the block layout
    (m1, n1), (m2, n2) = B.shape, C.shape
    A = np.zeros((m1 * m2, n1 * n2))
    for i1, j1, i2, j2 in itertools.product(range(m1), range(n1), range(m2), range(n2)):
        A[i1 * m2 + i2, j1 * n2 + j2] = B[i1, j1] * C[i2, j2]
    return A


def brute_plan_cost(m, n):
    return min(a * b + (m // a) * (n // b)
               for a in range(1, m + 1) if m % a == 0
               for b in range(1, n + 1) if n % b == 0)


class TestExpand:
    def test_unit_factor_is_identity(self, rng):
        C = rng.standard_normal((3, 5))
        np.testing.assert_array_equal(kp_expand((np.ones((1, 1)), C)), C)

    def test_worked_block_example(self):
        A = kp_expand(([[1, 2], [3, 4]], [[0, 1], [1, 0]]))
        expected = [[0, 1, 0, 2], [1, 0, 2, 0], [0, 3, 0, 4], [3, 0, 4, 0]]
        np.testing.assert_array_equal(A, expected)

    def test_154x164_shape(self, rng):
        pair = KroneckerPair(rng.standard_normal((11, 41)), rng.standard_normal((14, 4)))
        assert pair.shape == (154, 164)
        assert kp_expand(pair).shape == (154, 164)

    @settings(max_examples=50, deadline=None)
    @given(st.tuples(*[st.integers(1, 5)] * 4), st.integers(0, 2**32 - 1))
    def test_matches_elementwise_oracle(self, dims, seed):
        m1, n1, m2, n2 = dims
        r = np.random.default_rng(seed)
        B, C = r.standard_normal((m1, n1)), r.standard_normal((m2, n2))
        np.testing.assert_array_equal(kp_expand((B, C)), brute_kron(B, C))
        np.testing.assert_allclose(kp_expand((B, C)), np.kron(B, C))

    def test_rejects_empty_and_non_matrix(self):
        with pytest.raises(KronShapeError):
            KroneckerPair(np.zeros((0, 3)), np.ones((2, 2)))
        with pytest.raises(KronShapeError):
            KroneckerPair(np.ones(3), np.ones((2, 2)))

    def test_rank_multiplicativity(self, rng):
        B = rng.standard_normal((5, 2)) @ rng.standard_normal((2, 6))   # rank 2
        C = rng.standard_normal((4, 4))
        rank = np.linalg.matrix_rank
        assert rank(kp_expand((B, C))) == rank(B) * rank(C) == 8

    def test_keeps_float32(self):
        B = np.ones((2, 2), dtype=np.float32)
        assert kp_expand((B, B)).dtype == np.float32


class TestChain:
    def test_scalars(self):
        assert kp_expand_chain([[[2.0]], [[3.0]], [[5.0]]]).tolist() == [[30.0]]

    def test_eight_identities(self):
        np.testing.assert_array_equal(kp_expand_chain([np.eye(2)] * 8), np.eye(256))

    def test_three_factors_match_nested_pair(self, rng):
        f = [rng.standard_normal((2, 2)) for _ in range(3)]
        nested = kp_expand((f[0], kp_expand((f[1], f[2]))))
        np.testing.assert_array_equal(kp_expand_chain(f), nested)
        left = kp_expand((kp_expand((f[0], f[1])), f[2]))
        np.testing.assert_allclose(kp_expand_chain(f), left, rtol=1e-14)

    def test_needs_two_factors(self):
        with pytest.raises(KronShapeError):
            KroneckerChain((np.eye(2),))

    def test_chain_shape(self, rng):
        chain = KroneckerChain((rng.standard_normal((2, 3)), rng.standard_normal((1, 4)),
                                rng.standard_normal((5, 1))))
        assert chain.shape == (10, 12)
        assert kp_expand_chain(chain).shape == (10, 12)

    def test_chain_matvec(self, rng):
        x = rng.standard_normal(8)
        np.testing.assert_array_equal(kp_matvec_chain([np.eye(2)] * 3, x), x)
        B, C = rng.standard_normal((3, 2)), rng.standard_normal((2, 4))
        y = rng.standard_normal(8)
        np.testing.assert_allclose(kp_matvec_chain([B, C], y), kp_matvec((B, C), y), rtol=1e-12)
        f = [rng.standard_normal((2, 2)) for _ in range(8)]
        z = rng.standard_normal(256)
        np.testing.assert_allclose(kp_matvec_chain(f, z), kp_expand_chain(f) @ z, rtol=1e-12)
        with pytest.raises(KronShapeError):
            kp_matvec_chain(f, z[:10])


class TestMatvec:
    def test_identity_operator(self, rng):
        x = rng.standard_normal(12)
        np.testing.assert_allclose(kp_matvec((np.eye(3), np.eye(4)), x), x)

    def test_154x164_shapes(self, rng):
        pair = KroneckerPair(rng.standard_normal((11, 41)), rng.standard_normal((14, 4)))
        x = rng.standard_normal(164)
        y = kp_matvec(pair, x)
        assert y.shape == (154,)
        np.testing.assert_allclose(y, kp_expand(pair) @ x, rtol=1e-12, atol=1e-12)

    def test_small_random(self, rng):
        B, C = rng.standard_normal((3, 2)), rng.standard_normal((2, 5))
        x = rng.standard_normal(10)
        y, ref = kp_matvec((B, C), x), np.kron(B, C) @ x
        assert np.max(np.abs(y - ref)) <= 1e-12 * np.max(np.abs(ref))

    def test_vec_identity(self, rng):
        # vec(C X B^T) = (B kron C) vec(X) with column stacking
        B, C = rng.standard_normal((4, 3)), rng.standard_normal((2, 5))
        X = rng.standard_normal((5, 3))
        y = kp_matvec((B, C), X.reshape(-1, order="F"))
        np.testing.assert_allclose(y, (C @ X @ B.T).reshape(-1, order="F"), rtol=1e-13)

    def test_batched_equals_columnwise(self, rng):
        B, C = rng.standard_normal((3, 4)), rng.standard_normal((5, 2))
        X = rng.standard_normal((8, 6))
        Y = kp_matvec((B, C), X)
        for j in range(6):
            np.testing.assert_allclose(Y[:, j], kp_matvec((B, C), X[:, j]), rtol=1e-13)

    def test_shape_mismatch(self, rng):
        with pytest.raises(KronShapeError):
            kp_matvec((np.eye(2), np.eye(3)), np.ones(5))

    @settings(max_examples=60, deadline=None)
    @given(st.tuples(*[st.integers(1, 64)] * 4), st.integers(0, 2**32 - 1))
    def test_oracle_equivalence_property(self, dims, seed):
        m1, n1, m2, n2 = dims
        if m1 * n1 * m2 * n2 > 2_000_000:
            return
        r = np.random.default_rng(seed)
        B, C = r.standard_normal((m1, n1)), r.standard_normal((m2, n2))
        x = r.standard_normal(n1 * n2)
        diff = kp_matvec((B, C), x) - kp_expand((B, C)) @ x
        assert np.max(np.abs(diff)) <= 1e-10 * np.max(np.abs(x))


class TestPlanner:
    @pytest.mark.parametrize("k,expected", [(256, [2] * 8), (154, [2, 7, 11]), (164, [2, 2, 41]),
                                            (1, []), (97, [97])])
    def test_prime_factorize(self, k, expected):
        assert prime_factorize(k) == expected
        assert math.prod(prime_factorize(k)) == k

    def test_divisors(self):
        assert divisors(12) == [1, 2, 3, 4, 6, 12]
        assert divisors(1) == [1]

    def test_256(self):
        plan = plan_factor_shapes(256, 256)
        assert (plan.shape1, plan.shape2) == ((16, 16), (16, 16))
        assert plan.cost == 512 and plan.compression == 128

    def test_154x164_beats_fifty(self):
        plan = plan_factor_shapes(154, 164)
        assert plan.cost == brute_plan_cost(154, 164) <= 507
        assert plan.compression >= Fraction(498, 10)

    def test_4x4(self):
        plan = plan_factor_shapes(4, 4)
        assert (plan.shape1, plan.shape2) == ((2, 2), (2, 2))
        assert plan.compression == 2

    def test_greedy_reproduces_reduce_list(self):
        plan = plan_factor_shapes(154, 164, strategy="greedy")
        assert (plan.shape1, plan.shape2) == ((14, 4), (11, 41))
        assert plan.cost == 507
        g = plan_factor_shapes(256, 256, strategy="greedy")
        assert g.compression == 128

    def test_prime_dims_warn(self):
        with pytest.warns(UserWarning, match="degenerate"):
            plan = plan_factor_shapes(7, 7)
        assert plan.degenerate
        assert plan.shape1[0] * plan.shape2[0] == 7

    def test_rejects_tiny_and_unknown(self):
        with pytest.raises(ValueError):
            plan_factor_shapes(1, 8)
        with pytest.raises(ValueError):
            plan_factor_shapes(8, 8, strategy="random")

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 300), st.integers(2, 300))
    def test_optimal_and_consistent(self, m, n):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            plan = plan_factor_shapes(m, n)
            greedy = plan_factor_shapes(m, n, strategy="greedy")
        assert plan.shape1[0] * plan.shape2[0] == m and plan.shape1[1] * plan.shape2[1] == n
        assert plan.cost == brute_plan_cost(m, n)
        assert greedy.cost >= plan.cost
        assert plan.compression == Fraction(m * n, plan.cost)

    def test_as_dict(self):
        d = plan_factor_shapes(154, 164).as_dict()
        assert d["compression"] == 79.42 and d["cost"] == 318


class TestCompression:
    def test_154x164_greedy_split(self):
        r = compression_ratio(154, 164, (11, 41), (14, 4))
        assert r == Fraction(25256, 507)
        assert round(float(r), 2) == 49.81

    def test_exact_values(self):
        assert compression_ratio(256, 256, (32, 8), (8, 32)) == 128
        assert compression_ratio(256, 256, (2, 2), (128, 128)) == Fraction(65536, 16388)
        assert abs(float(compression_ratio(256, 256, (2, 2), (128, 128))) - 4.0) < 1e-3

    def test_inconsistent(self):
        with pytest.raises(KronShapeError):
            compression_ratio(10, 10, (2, 2), (4, 5))


def test_flop_ordering():
    # strict saving iff (m1 - 1)(n2 - 1) > 1; m1 = n2 = 2 ties with dense
    for dims in itertools.product(range(2, 6), repeat=4):
        m1, n1, m2, n2 = dims
        flops, dense = kp_flops((m1, n1), (m2, n2)), m1 * m2 * n1 * n2
        assert flops <= dense
        assert (flops < dense) == ((m1 - 1) * (n2 - 1) > 1)
    assert kp_flops((2, 2), (2, 2)) == 16
    assert kp_flops((32, 16), (32, 32)) < 1024 * 512
