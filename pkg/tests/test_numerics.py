import numpy as np
import pytest

from nivec.numerics import (as_matrix, check_symmetric, cholesky, make_rng,
                            solve_psd, stable_softmax, sym_eig)


def random_spd(rng, n, jitter=0.5):
    a = rng.standard_normal((n, n))
    return a @ a.T + jitter * np.eye(n)


class TestStableSoftmax:
    def test_matches_naive_on_small_logits(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            z = rng.standard_normal((5, 7))
            naive = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            np.testing.assert_allclose(stable_softmax(z, axis=1), naive,
                                       rtol=0, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        p = stable_softmax(rng.standard_normal((30, 8)) * 50.0, axis=1)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(p >= 0)

    def test_huge_logits_stay_finite(self):
        p = stable_softmax(np.array([1e4, 0.0, -1e4]))
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p[0], 1.0, atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((4, 6))
        np.testing.assert_allclose(stable_softmax(z, axis=1),
                                   stable_softmax(z + 123.0, axis=1), atol=1e-15)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            stable_softmax(np.array([1.0, np.nan]))


class TestMatrixHelpers:
    def test_as_matrix_rejects_vector(self):
        with pytest.raises(ValueError):
            as_matrix(np.arange(3.0))

    def test_check_symmetric(self):
        a = np.array([[1.0, 2.0], [2.0, 3.0]])
        check_symmetric(a)
        with pytest.raises(ValueError):
            check_symmetric(np.array([[1.0, 2.0], [2.5, 3.0]]))

    def test_cholesky_reconstructs(self):
        rng = np.random.default_rng(3)
        for n in (1, 2, 5, 9):
            a = random_spd(rng, n)
            ell = cholesky(a)
            np.testing.assert_allclose(ell @ ell.T, a, atol=1e-10)
            assert np.all(np.diag(ell) > 0)

    def test_cholesky_rejects_indefinite(self):
        with pytest.raises(ValueError, match="positive definite"):
            cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))

    def test_sym_eig_descending_and_reconstructs(self):
        rng = np.random.default_rng(4)
        a = random_spd(rng, 6)
        w, v = sym_eig(a)
        assert np.all(np.diff(w) <= 0)
        np.testing.assert_allclose(v @ np.diag(w) @ v.T, a, atol=1e-10)

    def test_solve_psd_matches_dense_solve(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            a = random_spd(rng, 7)
            b = rng.standard_normal((7, 3))
            np.testing.assert_allclose(solve_psd(a, b), np.linalg.solve(a, b),
                                       atol=1e-9)


class TestMakeRng:
    def test_same_seed_and_tags_reproduce(self):
        a = make_rng(42, "alpha", 3).standard_normal(16)
        b = make_rng(42, "alpha", 3).standard_normal(16)
        np.testing.assert_array_equal(a, b)

    def test_different_tags_decorrelate(self):
        a = make_rng(42, "alpha").standard_normal(16)
        b = make_rng(42, "beta").standard_normal(16)
        assert not np.allclose(a, b)

    def test_different_seeds_differ(self):
        a = make_rng(1, "x").standard_normal(8)
        b = make_rng(2, "x").standard_normal(8)
        assert not np.allclose(a, b)
