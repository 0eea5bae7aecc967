import json

import numpy as np
import pytest

from kprnn.analysis import amplification_bound_check, analyze_operator, svd_metrics
from kprnn.operators import DenseOperator, KronOperator, LowRankOperator, SparseOperator


class TestSvdMetrics:
    def test_identity(self):
        r = svd_metrics(np.eye(5))
        assert (r.numerical_rank, r.condition_number, r.sigma_max) == (5, 1.0, 1.0)
        assert r.full_rank and not r.flags

    def test_diag(self):
        r = svd_metrics(np.diag([10.0, 1.0]))
        assert r.condition_number == pytest.approx(10.0) and r.sigma_max == pytest.approx(10.0)

    def test_rank_one(self, rng):
        u, v = rng.standard_normal(6), rng.standard_normal(4)
        r = svd_metrics(np.outer(u, v))
        assert r.numerical_rank == 1 and not r.full_rank
        assert r.sigma_max == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v), rel=1e-12)

    def test_zero_matrix_flagged(self):
        r = svd_metrics(np.zeros((3, 4)))
        assert r.numerical_rank == 0 and r.condition_number is None
        assert "zero-matrix" in r.flags

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            svd_metrics(np.array([[np.inf]]))

    def test_json(self):
        d = json.loads(svd_metrics(np.eye(2), "w").to_json())
        assert d["label"] == "w" and d["shape"] == [2, 2]


class TestAnalyzeOperator:
    def test_kron_full_rank_and_identities(self, rng):
        op = KronOperator(rng.standard_normal((4, 4)), rng.standard_normal((3, 3)))
        r = analyze_operator(op, "k")
        assert r.numerical_rank == 12 and r.full_rank
        assert len(r.factors) == 2 and r.factors[0].label == "k.B"
        assert all(e <= 1e-8 for e in r.identity_errors.values())
        assert set(r.identity_errors) == {"rank", "sigma_max", "condition_number"}
        assert not r.flags

    def test_kron_deficient_factor_flagged(self, rng):
        B = np.outer(rng.standard_normal(3), rng.standard_normal(3))
        r = analyze_operator(KronOperator(B, rng.standard_normal((2, 2))))
        assert r.numerical_rank == 2
        assert "rank-deficient-factor" in r.flags
        assert r.identity_errors["rank"] == 0

    def test_lowrank(self, rng):
        op = LowRankOperator(rng.standard_normal((8, 3)), rng.standard_normal((3, 9)))
        assert analyze_operator(op).numerical_rank <= 3

    def test_sparse_and_dense_agree(self, rng):
        W = rng.standard_normal((5, 5)) * (rng.random((5, 5)) > 0.3)
        a = analyze_operator(SparseOperator.from_dense(W))
        b = analyze_operator(DenseOperator(W))
        assert a.sigma_max == pytest.approx(b.sigma_max, rel=1e-14)


class TestAmplification:
    def test_identity(self):
        r = amplification_bound_check(np.eye(4), trials=10)
        assert r.observed_max == pytest.approx(1.0) and r.holds

    def test_diag_e1(self):
        r = amplification_bound_check(np.diag([10.0, 1.0]), xs=[[1.0, 0.0]])
        assert r.observed_max == pytest.approx(10.0) and r.sigma_max == pytest.approx(10.0)

    def test_random_approaches_top_singular_vector(self, rng):
        A = rng.standard_normal((20, 20))
        r = amplification_bound_check(A, trials=1000, seed=1)
        assert r.holds and r.gap >= -1e-10 * r.sigma_max
        # power iteration oracle for the maximizer
        v = rng.standard_normal(20)
        for _ in range(500):
            v = A.T @ (A @ v)
            v /= np.linalg.norm(v)
        top = amplification_bound_check(A, xs=[v])
        assert top.observed_max == pytest.approx(top.sigma_max, rel=1e-10)

    def test_kron_randomized_suite(self, rng):
        for seed in range(20):
            r = np.random.default_rng(seed)
            op = KronOperator(r.standard_normal((3, 4)), r.standard_normal((5, 2)))
            assert amplification_bound_check(op, trials=50, seed=seed).holds

    def test_trials_must_be_positive(self):
        with pytest.raises(ValueError):
            amplification_bound_check(np.eye(2), trials=0)
