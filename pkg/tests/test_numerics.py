import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats
from scipy.spatial.distance import cdist

from otalign.exceptions import NumericalError, RejectedInputError
from otalign.numerics import SeededRng, as_matrix, finite_diff_grad, gaussian_sample, pairwise_euclidean


def loop_distances(A, B):
    out = [[0.0] * len(B) for _ in A]
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            out[i][j] = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    return np.array(out)


class TestPairwiseEuclidean:
    def test_345_triangle(self):
        assert pairwise_euclidean([[0, 0]], [[3, 4]]).tolist() == [[5.0]]

    def test_identical_points(self):
        assert pairwise_euclidean([[1, 2]], [[1, 2]]).tolist() == [[0.0]]

    def test_hand_example_against_loop(self):
        A, B = [[0, 0], [1, 0]], [[0, 1]]
        got = pairwise_euclidean(A, B)
        np.testing.assert_allclose(got, [[1.0], [math.sqrt(2)]], rtol=0, atol=1e-15)
        np.testing.assert_allclose(got, loop_distances(A, B), rtol=0, atol=1e-15)

    def test_matches_scipy_cdist(self):
        rng = np.random.default_rng(0)
        A, B = rng.normal(size=(7, 5)), rng.normal(size=(4, 5))
        np.testing.assert_allclose(pairwise_euclidean(A, B), cdist(A, B), rtol=1e-13, atol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(RejectedInputError):
            pairwise_euclidean([[0, 0]], [[0, 0, 0]])

    def test_empty_batch(self):
        with pytest.raises(RejectedInputError):
            pairwise_euclidean(np.zeros((0, 2)), [[0, 0]])

    def test_non_finite(self):
        with pytest.raises(NumericalError):
            pairwise_euclidean([[np.nan, 0]], [[0, 0]])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)),
                  elements=st.floats(-1e3, 1e3)))
    def test_self_distance_symmetric_zero_diagonal(self, A):
        D = pairwise_euclidean(A, A)
        assert np.array_equal(D, D.T)
        assert np.all(np.diag(D) == 0.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 3), elements=st.floats(-1e3, 1e3)))
    def test_triangle_inequality(self, P):
        D = pairwise_euclidean(P, P)
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    assert D[i, k] <= D[i, j] + D[j, k] + 1e-12 * max(1.0, D.max())


class TestFiniteDiff:
    def test_sum_of_squares(self):
        g = finite_diff_grad(lambda x: np.sum(x ** 2), np.array([1.0, 2.0]))
        np.testing.assert_allclose(g, [2.0, 4.0], rtol=0, atol=1e-8)

    def test_constant(self):
        g = finite_diff_grad(lambda x: 3.0, np.array([0.5, -2.0, 7.0]))
        assert np.all(g == 0.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_quadratics_exact(self, seed):
        rng = np.random.default_rng(seed)
        Q = rng.normal(size=(4, 4))
        c = rng.normal(size=4)
        x = rng.normal(size=4)
        analytic = (Q + Q.T) @ x + c
        g = finite_diff_grad(lambda z: z @ Q @ z + c @ z + 1.5, x)
        np.testing.assert_allclose(g, analytic, rtol=1e-7, atol=1e-9)

    def test_non_finite_names_coordinate(self):
        def f(x):
            # finite at x, NaN once coordinate 1 steps below zero
            with np.errstate(invalid="ignore"):
                return np.sqrt(x[1])
        with pytest.raises(NumericalError, match="coordinate 1"):
            finite_diff_grad(f, np.array([1.0, 0.0, 1.0]))

    def test_does_not_mutate_input(self):
        x = np.array([1.0, 2.0])
        finite_diff_grad(lambda z: float(z @ z), x)
        assert x.tolist() == [1.0, 2.0]


class TestSeededRng:
    def test_gaussian_sigma_zero(self):
        assert gaussian_sample(SeededRng(0), 3, 0.0, 0.0).tolist() == [0.0, 0.0, 0.0]

    def test_repeatable(self):
        a = gaussian_sample(SeededRng(11), 5, 0.0, 1.0)
        b = gaussian_sample(SeededRng(11), 5, 0.0, 1.0)
        assert np.array_equal(a, b)

    def test_sample_std(self):
        x = gaussian_sample(SeededRng(5), 10000, 0.0, 0.1)
        assert 0.097 <= np.std(x, ddof=1) <= 0.103
        # the draws should also look normal
        assert stats.kstest(x / 0.1, "norm").pvalue > 1e-3

    def test_children_independent_of_parent_draws(self):
        r1 = SeededRng(3)
        r1.normal(size=100)
        r2 = SeededRng(3)
        assert np.array_equal(r1.child("x").normal(size=4), r2.child("x").normal(size=4))

    def test_distinct_labels_distinct_streams(self):
        r = SeededRng(3)
        assert not np.array_equal(r.child("a").normal(size=4), r.child("b").normal(size=4))

    def test_negative_sigma(self):
        with pytest.raises(RejectedInputError):
            gaussian_sample(SeededRng(0), 3, 0.0, -1.0)


def test_as_matrix_rejects_wrong_rank():
    with pytest.raises(RejectedInputError):
        as_matrix([1.0, 2.0])
