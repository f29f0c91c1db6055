"""Oracle tests for the numeric primitives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from actsparse.numerics import (
    column_l2_norms,
    kl_divergence,
    kl_rows,
    kth_largest_threshold,
    mse,
    softmax,
)


class TestColumnNorms:
    def test_three_four_five_and_zero_column(self):
        w = np.array([[3.0, 0.0], [4.0, 0.0]], dtype=np.float32)
        np.testing.assert_allclose(column_l2_norms(w), [5.0, 0.0], atol=1e-7)

    def test_identity(self):
        np.testing.assert_allclose(column_l2_norms(np.eye(3, dtype=np.float32)), [1, 1, 1])

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((8, 8)).astype(np.float32)
        oracle = np.array(
            [np.sqrt(sum(float(w[i, j]) ** 2 for i in range(8))) for j in range(8)]
        )
        np.testing.assert_allclose(column_l2_norms(w), oracle, atol=1e-6)


class TestKthLargestThreshold:
    def test_half_keep(self):
        assert kth_largest_threshold(np.array([1.0, 2.0, 3.0, 4.0]), 0.5) == 3.0

    def test_keep_all_sentinel(self):
        assert kth_largest_threshold(np.array([9.0, -2.0]), 1.0) == -np.inf

    def test_keep_none_sentinel(self):
        tau = kth_largest_threshold(np.array([1.0, 2.0]), 0.0)
        assert tau == np.inf

    def test_tie_inflation(self):
        # tau lands on the tied value, so more entries survive than k.
        pool = np.array([5.0, 5.0, 5.0, 1.0])
        tau = kth_largest_threshold(pool, 0.25)
        assert tau == 5.0
        assert int((pool >= tau).sum()) == 3

    def test_empty_pool_errors(self):
        with pytest.raises(ValueError):
            kth_largest_threshold(np.array([]), 0.5)

    def test_large_pool_kept_fraction(self):
        rng = np.random.default_rng(1)
        pool = rng.standard_normal(10_000)
        tau = kth_largest_threshold(pool, 0.6)
        kept = float((pool >= tau).mean())
        assert 0.5999 <= kept <= 0.6001

    @given(
        pool=hnp.arrays(
            np.float64,
            st.integers(1, 200),
            elements=st.floats(-1e6, 1e6, allow_nan=False),
        ),
        r=st.floats(0.01, 0.99),
    )
    @settings(max_examples=200, deadline=None)
    def test_matches_full_sort_oracle(self, pool, r):
        k = int(round(r * pool.size))
        tau = kth_largest_threshold(pool, r)
        if k == 0:
            assert tau == np.inf
        else:
            assert tau == np.sort(pool)[::-1][k - 1]


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_no_overflow(self):
        p = softmax(np.array([1000.0, 0.0]))
        assert np.isfinite(p).all()
        np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-6)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal(16)
        naive = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(softmax(z), naive, atol=1e-6)

    def test_batched_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        p = softmax(rng.standard_normal((5, 9)))
        np.testing.assert_allclose(p.sum(axis=-1), np.ones(5), atol=1e-5)


class TestKL:
    def test_identical_distributions(self):
        p = np.array([0.2, 0.3, 0.5])
        assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-9)

    def test_analytic_ln2(self):
        assert kl_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(
            np.log(2.0), abs=1e-7
        )

    def test_matches_term_by_term_oracle(self):
        rng = np.random.default_rng(4)
        p = softmax(rng.standard_normal(12))
        q = softmax(rng.standard_normal(12))
        oracle = sum(
            float(pi) * np.log(float(pi) / float(qi)) for pi, qi in zip(p, q) if pi > 0
        )
        assert kl_divergence(p, q) == pytest.approx(oracle, abs=1e-6)

    def test_floor_prevents_division_blowup(self):
        p = np.array([0.5, 0.5])
        q = np.array([1.0, 0.0])
        assert np.isfinite(kl_divergence(p, q))

    def test_kl_rows_matches_scalar(self):
        rng = np.random.default_rng(5)
        p = softmax(rng.standard_normal((4, 8)))
        q = softmax(rng.standard_normal((4, 8)))
        rows = kl_rows(p, q)
        for i in range(4):
            assert rows[i] == pytest.approx(kl_divergence(p[i], q[i]), abs=1e-6)


class TestMSE:
    def test_identical(self):
        a = np.array([1.0, 2.0])
        assert mse(a, a) == 0.0

    def test_analytic(self):
        assert mse(np.array([1.0, 1.0]), np.array([0.0, 0.0])) == pytest.approx(1.0)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(6)
        a, b = rng.standard_normal(20), rng.standard_normal(20)
        naive = float(np.mean([(x - y) ** 2 for x, y in zip(a, b)]))
        assert mse(a, b) == pytest.approx(naive, abs=1e-6)
