"""Tests for the scoring backend: whitening, length normalization,
two-covariance PLDA (EM fit and likelihood-ratio scoring) and adaptive
score normalization."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from nivec.backend import (
    ASNORM_SIGMA_FLOOR,
    Backend,
    PldaModel,
    asnorm,
    fit_backend,
    fit_plda,
    fit_preprocessor,
    length_normalize,
    length_normalize_rows,
    plda_score,
    plda_score_matrix,
    plda_score_pairs,
    read_backend,
    write_backend,
)


def random_spd(rng, e, scale=1.0):
    a = rng.standard_normal((e, e))
    return scale * (a @ a.T / e + 0.5 * np.eye(e))


def random_model(rng, e=4):
    return PldaModel(rng.standard_normal(e), random_spd(rng, e), random_spd(rng, e))


def plda_corpus(rng, num_speakers, utts, between, within, mu):
    e = mu.shape[0]
    cb = np.linalg.cholesky(between)
    cw = np.linalg.cholesky(within)
    xs, labels = [], []
    for spk in range(num_speakers):
        y = cb @ rng.standard_normal(e)
        for _ in range(utts):
            xs.append(mu + y + cw @ rng.standard_normal(e))
            labels.append(f"s{spk}")
    return np.array(xs), labels


def dense_llr(e1, e2, model):
    """Joint-Gaussian likelihood ratio computed with explicit 2E x 2E
    covariances, the oracle for the closed-form pair score."""
    e = model.mu.shape[0]
    tot = model.between + model.within
    zero = np.zeros((e, e))
    same = np.block([[tot, model.between], [model.between, tot]])
    diff = np.block([[tot, zero], [zero, tot]])
    joint = np.concatenate([e1, e2])
    mean = np.concatenate([model.mu, model.mu])
    return (multivariate_normal.logpdf(joint, mean, same)
            - multivariate_normal.logpdf(joint, mean, diff))


class TestPreprocessor:
    def test_whitened_covariance_is_identity(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((500, 6)) @ random_spd(rng, 6) + rng.standard_normal(6)
        prep = fit_preprocessor(x)
        y = prep.transform(x)
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-10)
        cov = y.T @ y / y.shape[0]
        np.testing.assert_allclose(cov, np.eye(6), atol=1e-6)

    def test_too_few_embeddings_rejected(self):
        with pytest.raises(ValueError):
            fit_preprocessor(np.zeros((1, 4)))

    def test_underdetermined_whitening_warns(self):
        rng = np.random.default_rng(1)
        with pytest.warns(UserWarning, match="unstable"):
            fit_preprocessor(rng.standard_normal((4, 6)))


class TestLengthNormalize:
    def test_hand_case(self):
        np.testing.assert_allclose(length_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        v = rng.standard_normal(7)
        once = length_normalize(v)
        np.testing.assert_allclose(length_normalize(once), once, atol=1e-15)
        assert abs(np.linalg.norm(once) - 1.0) <= 1e-12

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            length_normalize(np.zeros(3))
        with pytest.raises(ValueError):
            length_normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))

    def test_rows_variant_matches_per_row(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 4))
        rows = length_normalize_rows(x)
        for i in range(5):
            np.testing.assert_allclose(rows[i], length_normalize(x[i]), atol=1e-15)


class TestPldaScoring:
    def test_matches_dense_joint_gaussian(self):
        rng = np.random.default_rng(4)
        for e in (1, 2, 4, 6):
            model = random_model(rng, e)
            for _ in range(5):
                e1 = rng.standard_normal(e)
                e2 = rng.standard_normal(e)
                got = plda_score(e1, e2, model)
                np.testing.assert_allclose(got, dense_llr(e1, e2, model), atol=1e-8)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        model = random_model(rng, 5)
        for _ in range(10):
            a, b = rng.standard_normal(5), rng.standard_normal(5)
            assert abs(plda_score(a, b, model) - plda_score(b, a, model)) <= 1e-10

    def test_vanishing_between_covariance_zeroes_scores(self):
        rng = np.random.default_rng(6)
        model = PldaModel(rng.standard_normal(4), 1e-14 * np.eye(4), random_spd(rng, 4))
        for _ in range(5):
            s = plda_score(rng.standard_normal(4), rng.standard_normal(4), model)
            assert abs(s) < 1e-6

    def test_matrix_and_pair_forms_match_scalar(self):
        rng = np.random.default_rng(7)
        model = random_model(rng, 3)
        left = rng.standard_normal((4, 3))
        right = rng.standard_normal((6, 3))
        mat = plda_score_matrix(left, right, model)
        assert mat.shape == (4, 6)
        for i in range(4):
            for j in range(6):
                np.testing.assert_allclose(mat[i, j], plda_score(left[i], right[j], model),
                                           atol=1e-12)
        pairs = plda_score_pairs(left, right[:4], model)
        for i in range(4):
            np.testing.assert_allclose(pairs[i], plda_score(left[i], right[i], model),
                                       atol=1e-12)
        with pytest.raises(ValueError):
            plda_score_pairs(left, right, model)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(8)
        model = random_model(rng, 4)
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        rotated = PldaModel(q @ model.mu, q @ model.between @ q.T, q @ model.within @ q.T)
        for _ in range(5):
            a, b = rng.standard_normal(4), rng.standard_normal(4)
            np.testing.assert_allclose(plda_score(q @ a, q @ b, rotated),
                                       plda_score(a, b, model), atol=1e-8)

    def test_same_speaker_pairs_score_higher_on_average(self):
        rng = np.random.default_rng(9)
        e = 3
        between = random_spd(rng, e, 2.0)
        within = random_spd(rng, e, 0.5)
        mu = rng.standard_normal(e)
        model = PldaModel(mu, between, within)
        x, labels = plda_corpus(rng, 30, 4, between, within, mu)
        same, diff = [], []
        for i in range(0, len(labels), 2):
            for j in range(i + 1, min(i + 8, len(labels))):
                s = plda_score(x[i], x[j], model)
                (same if labels[i] == labels[j] else diff).append(s)
        assert np.mean(same) > np.mean(diff)


class TestPldaFit:
    def test_objective_monotone(self):
        rng = np.random.default_rng(10)
        e = 4
        x, labels = plda_corpus(rng, 20, 5, random_spd(rng, e), random_spd(rng, e, 0.5),
                                rng.standard_normal(e))
        _, objectives = fit_plda(x, labels, num_iters=12)
        assert len(objectives) == 12
        for prev, cur in zip(objectives, objectives[1:]):
            assert cur >= prev - 1e-8 * abs(prev), (prev, cur)

    def test_recovers_planted_covariances(self):
        rng = np.random.default_rng(11)
        e = 4
        q1, _ = np.linalg.qr(rng.standard_normal((e, e)))
        q2, _ = np.linalg.qr(rng.standard_normal((e, e)))
        between = (q1 * np.array([2.0, 1.0, 0.5, 0.25])) @ q1.T
        within = (q2 * np.array([0.8, 0.6, 0.5, 0.3])) @ q2.T
        mu = rng.standard_normal(e)
        x, labels = plda_corpus(rng, 500, 10, between, within, mu)
        model, _ = fit_plda(x, labels, num_iters=20)
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(model.between)),
                                   np.sort(np.linalg.eigvalsh(between)), rtol=0.15)
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(model.within)),
                                   np.sort(np.linalg.eigvalsh(within)), rtol=0.15)
        np.testing.assert_allclose(model.mu, mu, atol=0.3)

    def test_no_speaker_effect_shrinks_between(self):
        rng = np.random.default_rng(12)
        e = 4
        within = random_spd(rng, e, 0.8)
        x, labels = plda_corpus(rng, 50, 8, 1e-30 * np.eye(e), within,
                                rng.standard_normal(e))
        model, _ = fit_plda(x, labels, num_iters=15)
        assert np.linalg.norm(model.between) < 0.1 * np.linalg.norm(model.within)

    def test_label_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            fit_plda(np.zeros((4, 2)), ["a", "a", "b"])

    def test_needs_two_multi_utterance_speakers(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((4, 2))
        with pytest.raises(ValueError):
            fit_plda(x, ["a", "a", "a", "b"])


def naive_asnorm(raw, enroll, test, cohort, model, top_k):
    out = []
    for i in range(enroll.shape[0]):
        es = sorted((plda_score(enroll[i], c, model) for c in cohort), reverse=True)[:top_k]
        ts = sorted((plda_score(test[i], c, model) for c in cohort), reverse=True)[:top_k]
        mu_e, sig_e = np.mean(es), max(np.std(es), ASNORM_SIGMA_FLOOR)
        mu_t, sig_t = np.mean(ts), max(np.std(ts), ASNORM_SIGMA_FLOOR)
        out.append(0.5 * ((raw[i] - mu_e) / sig_e + (raw[i] - mu_t) / sig_t))
    return np.array(out)


class TestAsnorm:
    def test_matches_naive_loop(self):
        rng = np.random.default_rng(14)
        model = random_model(rng, 3)
        enroll = rng.standard_normal((6, 3))
        test = rng.standard_normal((6, 3))
        cohort = rng.standard_normal((25, 3))
        raw = plda_score_pairs(enroll, test, model)
        for top_k in (5, 10, 25):
            got = asnorm(raw, enroll, test, cohort, model, top_k=top_k)
            want = naive_asnorm(raw, enroll, test, cohort, model, top_k)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_constant_cohort_stays_finite(self):
        rng = np.random.default_rng(15)
        model = random_model(rng, 3)
        enroll = rng.standard_normal((2, 3))
        test = rng.standard_normal((2, 3))
        cohort = np.tile(rng.standard_normal(3), (10, 1))
        raw = plda_score_pairs(enroll, test, model)
        got = asnorm(raw, enroll, test, cohort, model, top_k=10)
        assert np.all(np.isfinite(got))

    def test_validation(self):
        rng = np.random.default_rng(16)
        model = random_model(rng, 2)
        v = rng.standard_normal((1, 2))
        with pytest.raises(ValueError, match="empty"):
            asnorm(np.zeros(1), v, v, np.zeros((0, 2)), model)
        with pytest.raises(ValueError, match="top_k"):
            asnorm(np.zeros(1), v, v, rng.standard_normal((5, 2)), model, top_k=6)


class TestBackend:
    def fitted(self, rng):
        e = 5
        between = random_spd(rng, e, 1.5)
        within = random_spd(rng, e, 0.5)
        x, labels = plda_corpus(rng, 20, 5, between, within, rng.standard_normal(e))
        return fit_backend(x, labels, cohort_size=30, top_k=10, plda_iters=8,
                           rng=np.random.default_rng(0)), x

    def test_project_centers_whitens_and_normalizes(self):
        rng = np.random.default_rng(17)
        backend, x = self.fitted(rng)
        proj = backend.project(x)
        np.testing.assert_allclose(np.linalg.norm(proj, axis=1), 1.0, atol=1e-12)

    def test_score_trials_with_and_without_normalization(self):
        rng = np.random.default_rng(18)
        backend, x = self.fitted(rng)
        enroll = backend.project(x[:4])
        test = backend.project(x[4:8])
        raw, norm = backend.score_trials(enroll, test)
        raw2, same = backend.score_trials(enroll, test, normalize=False)
        np.testing.assert_array_equal(raw, raw2)
        np.testing.assert_array_equal(raw2, same)
        assert not np.array_equal(raw, norm)

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(19)
        backend, x = self.fitted(rng)
        path = tmp_path / "backend.nivb"
        write_backend(backend, path)
        back = read_backend(path)
        np.testing.assert_array_equal(back.prep.center, backend.prep.center)
        np.testing.assert_array_equal(back.prep.whiten, backend.prep.whiten)
        np.testing.assert_array_equal(back.plda.mu, backend.plda.mu)
        np.testing.assert_array_equal(back.plda.between, backend.plda.between)
        np.testing.assert_array_equal(back.plda.within, backend.plda.within)
        np.testing.assert_array_equal(back.cohort, backend.cohort)
        assert back.top_k == backend.top_k
        enroll = backend.project(x[:3])
        test = backend.project(x[3:6])
        r1, n1 = backend.score_trials(enroll, test)
        r2, n2 = back.score_trials(enroll, test)
        np.testing.assert_array_equal(r1, r2)
        np.testing.assert_array_equal(n1, n2)

    def test_write_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(20)
        backend, _ = self.fitted(rng)
        p1, p2 = tmp_path / "a.nivb", tmp_path / "b.nivb"
        write_backend(backend, p1)
        write_backend(backend, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_default_cohort_is_leading_subset(self):
        rng = np.random.default_rng(21)
        e = 4
        x, labels = plda_corpus(rng, 12, 4, random_spd(rng, e), random_spd(rng, e, 0.5),
                                np.zeros(e))
        backend = fit_backend(x, labels, cohort_size=10, top_k=5, plda_iters=5)
        proj = backend.project(x)
        np.testing.assert_allclose(backend.cohort, proj[:10], atol=1e-12)
