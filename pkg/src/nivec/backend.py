"""Embedding post-processing and trial scoring: centering + whitening,
length normalization, two-covariance PLDA with EM fitting and closed-form
log-likelihood-ratio scoring, and adaptive symmetric score normalization.

PLDA model: x = mu + y + e with y ~ N(0, B) between speakers and
e ~ N(0, W) within. The per-iteration objective is the exact marginal
log-likelihood, computed per speaker by splitting the utterances into
their mean (covariance n B + W after scaling) and n-1 within-speaker
contrasts (covariance W each); an orthonormal change of basis makes the
two parts independent, so no joint n E x n E matrix is ever formed.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .blobio import read_blob, write_blob
from .numerics import cholesky, solve_psd, sym_eig

BACKEND_MAGIC = b"NIVB"

EIG_FLOOR_REL = 1e-8

ASNORM_SIGMA_FLOOR = 1e-6


@dataclass
class Preprocessor:
    center: np.ndarray
    whiten: np.ndarray

    def transform(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (x - self.center) @ self.whiten


def fit_preprocessor(embeddings) -> Preprocessor:
    """Centering vector and symmetric whitening matrix from sample
    covariance (eigenvalues floored at 1e-8 of the largest)."""
    x = np.asarray(embeddings, dtype=np.float64)
    n, e = x.shape
    if n < 2:
        raise ValueError("need at least 2 embeddings to fit a whitener")
    if n <= e:
        warnings.warn(f"only {n} embeddings for dimension {e}; whitening will be unstable")
    center = x.mean(axis=0)
    xc = x - center
    cov = xc.T @ xc / n
    vals, vecs = sym_eig(cov)
    vals = np.maximum(vals, EIG_FLOOR_REL * max(vals[0], 1e-300))
    whiten = (vecs / np.sqrt(vals)) @ vecs.T
    return Preprocessor(center, whiten)


def length_normalize(v):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("cannot length-normalize the zero vector")
    return v / norm


def length_normalize_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot length-normalize a zero row")
    return x / norms


@dataclass
class PldaModel:
    mu: np.ndarray
    between: np.ndarray     # B, PSD
    within: np.ndarray      # W, SPD
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def _scoring_matrices(self):
        """Q, P and the constant of the pair log-likelihood ratio."""
        if "q" not in self._cache:
            e = self.mu.shape[0]
            tot = self.between + self.within
            tot_inv = solve_psd(tot, np.eye(e))
            schur = tot - self.between @ tot_inv @ self.between
            f = solve_psd(0.5 * (schur + schur.T), np.eye(e))
            q = tot_inv - f
            p = tot_inv @ self.between @ f
            logdet_tot = 2.0 * np.sum(np.log(np.diag(cholesky(tot))))
            logdet_schur = 2.0 * np.sum(np.log(np.diag(cholesky(0.5 * (schur + schur.T)))))
            self._cache.update(q=q, p=0.5 * (p + p.T),
                               const=0.5 * (logdet_tot - logdet_schur))
        return self._cache["q"], self._cache["p"], self._cache["const"]


def plda_score(e1, e2, model: PldaModel):
    """log p(e1, e2 | same speaker) - log p(e1, e2 | different speakers)."""
    q, p, const = model._scoring_matrices()
    a1 = np.asarray(e1, dtype=np.float64) - model.mu
    a2 = np.asarray(e2, dtype=np.float64) - model.mu
    return float(0.5 * a1 @ q @ a1 + 0.5 * a2 @ q @ a2 + a1 @ p @ a2 + const)


def plda_score_matrix(left, right, model: PldaModel):
    """(N, M) scores for all pairs of rows."""
    q, p, const = model._scoring_matrices()
    a = np.asarray(left, dtype=np.float64) - model.mu
    b = np.asarray(right, dtype=np.float64) - model.mu
    qa = 0.5 * np.einsum("ne,ef,nf->n", a, q, a)
    qb = 0.5 * np.einsum("me,ef,mf->m", b, q, b)
    return qa[:, None] + qb[None, :] + a @ p @ b.T + const


def plda_score_pairs(left, right, model: PldaModel):
    """(N,) scores for N aligned row pairs."""
    left = np.atleast_2d(np.asarray(left, dtype=np.float64))
    right = np.atleast_2d(np.asarray(right, dtype=np.float64))
    if left.shape != right.shape:
        raise ValueError("paired scoring needs matching shapes")
    q, p, const = model._scoring_matrices()
    a = left - model.mu
    b = right - model.mu
    qa = 0.5 * np.einsum("ne,ef,nf->n", a, q, a)
    qb = 0.5 * np.einsum("ne,ef,nf->n", b, q, b)
    cross = np.einsum("ne,ef,nf->n", a, p, b)
    return qa + qb + cross + const


def _speaker_groups(labels):
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    return groups


def _plda_marginal_loglik(xs_by_speaker, mu, between, within):
    """Exact sum over speakers of log p(x_1..x_n); see module docstring."""
    e = mu.shape[0]
    ll = 0.0
    log2pi = np.log(2.0 * np.pi)
    chol_w = cholesky(within)
    logdet_w = 2.0 * np.sum(np.log(np.diag(chol_w)))
    w_inv = solve_psd(within, np.eye(e))
    for x in xs_by_speaker:
        n = x.shape[0]
        xbar = x.mean(axis=0)
        mean_cov = n * between + within
        diff = np.sqrt(n) * (xbar - mu)
        chol_m = cholesky(0.5 * (mean_cov + mean_cov.T))
        half = np.linalg.solve(chol_m, diff)
        logdet_m = 2.0 * np.sum(np.log(np.diag(chol_m)))
        ll += -0.5 * (e * log2pi + logdet_m + half @ half)
        if n > 1:
            xc = x - xbar
            scatter = xc.T @ xc
            ll += -0.5 * ((n - 1) * (e * log2pi + logdet_w)
                          + np.einsum("ef,fe->", w_inv, scatter))
    return ll


def fit_plda(embeddings, labels, num_iters=20):
    """EM for the two-covariance model; returns (model, per-iteration
    marginal log-likelihoods computed before each update)."""
    x = np.asarray(embeddings, dtype=np.float64)
    n, e = x.shape
    if len(labels) != n:
        raise ValueError("one label per embedding required")
    groups = _speaker_groups(labels)
    multi = sum(1 for idx in groups.values() if len(idx) >= 2)
    if len(groups) < 2 or multi < 2:
        raise ValueError("need at least 2 speakers with at least 2 utterances each")

    xs = [x[idx] for idx in groups.values()]
    mu = x.mean(axis=0)
    xc = x - mu
    total_cov = xc.T @ xc / n
    # Ridge only at initialization; the EM updates below are SPD by
    # construction (each contains a sum of posterior covariances), and an
    # in-loop ridge would void the exact monotonicity of the objective.
    ridge = 1e-6 * max(np.trace(total_cov) / e, 1e-12) * np.eye(e)
    between = 0.5 * total_cov + ridge
    within = 0.5 * total_cov + ridge

    objectives = []
    for _ in range(num_iters):
        objectives.append(_plda_marginal_loglik(xs, mu, between, within))
        w_inv = solve_psd(within, np.eye(e))
        b_inv = solve_psd(between, np.eye(e))
        sum_ey = np.zeros(e)
        sum_eyy = np.zeros((e, e))
        sum_resid = np.zeros((e, e))
        count = 0
        means = []
        for xg in xs:
            ng = xg.shape[0]
            prec = b_inv + ng * w_inv
            cov = solve_psd(prec, np.eye(e))
            m = cov @ (w_inv @ (xg - mu).sum(axis=0))
            means.append((xg, m, cov, ng))
            sum_ey += ng * m
            sum_eyy += cov + np.outer(m, m)
            count += ng
        mu_new = (x.sum(axis=0) - sum_ey) / count
        for xg, m, cov, ng in means:
            r = xg - mu_new - m
            sum_resid += r.T @ r + ng * cov
        mu = mu_new
        between = 0.5 * (sum_eyy + sum_eyy.T) / len(xs)
        within = 0.5 * (sum_resid + sum_resid.T) / count
    return PldaModel(mu, between, within), objectives


def asnorm(raw_scores, enroll, test, cohort, model: PldaModel, top_k=200):
    """Adaptive symmetric score normalization.

    For trial i with raw score s: let mu_e, sigma_e be mean/std of the
    top_k highest cohort scores against the enrollment embedding (same for
    the test side); the normalized score is the average of the two
    z-normalizations. sigma is floored at 1e-6.
    """
    raw_scores = np.asarray(raw_scores, dtype=np.float64)
    enroll = np.atleast_2d(np.asarray(enroll, dtype=np.float64))
    test = np.atleast_2d(np.asarray(test, dtype=np.float64))
    cohort = np.atleast_2d(np.asarray(cohort, dtype=np.float64))
    if cohort.shape[0] == 0:
        raise ValueError("cohort is empty")
    if top_k > cohort.shape[0]:
        raise ValueError(f"top_k {top_k} exceeds cohort size {cohort.shape[0]}")

    def side_stats(side):
        scores = plda_score_matrix(side, cohort, model)
        top = -np.sort(-scores, axis=1)[:, :top_k]
        mu = top.mean(axis=1)
        sigma = np.maximum(top.std(axis=1), ASNORM_SIGMA_FLOOR)
        return mu, sigma

    mu_e, sig_e = side_stats(enroll)
    mu_t, sig_t = side_stats(test)
    return 0.5 * ((raw_scores - mu_e) / sig_e + (raw_scores - mu_t) / sig_t)


@dataclass
class Backend:
    """Fitted preprocessing + PLDA + cohort, the full scoring stack."""

    prep: Preprocessor
    plda: PldaModel
    cohort: np.ndarray
    top_k: int = 200

    def project(self, vectors):
        """Preprocess raw vectors into PLDA space (center, whiten,
        length-normalize)."""
        return length_normalize_rows(self.prep.transform(np.atleast_2d(vectors)))

    def score_trials(self, enroll, test, normalize=True):
        """Raw and normalized scores for paired rows (already projected)."""
        raw = plda_score_pairs(enroll, test, self.plda)
        if not normalize:
            return raw, raw
        k = min(self.top_k, self.cohort.shape[0])
        return raw, asnorm(raw, enroll, test, self.cohort, self.plda, k)


def fit_backend(train_vectors, labels, cohort_size=2000, top_k=200,
                plda_iters=20, rng=None) -> Backend:
    """Fit the whole scoring stack on labeled training vectors; the cohort
    is a seeded random subset of the projected training vectors."""
    prep = fit_preprocessor(train_vectors)
    projected = length_normalize_rows(prep.transform(train_vectors))
    plda, _ = fit_plda(projected, labels, plda_iters)
    if rng is None:
        idx = np.arange(min(cohort_size, projected.shape[0]))
    else:
        idx = rng.permutation(projected.shape[0])[:cohort_size]
        idx = np.sort(idx)
    cohort = projected[idx]
    return Backend(prep, plda, cohort, min(top_k, cohort.shape[0]))


def write_backend(backend: Backend, path):
    header = {"kind": "backend", "dim": int(backend.prep.center.shape[0]),
              "top_k": int(backend.top_k)}
    arrays = [("center", backend.prep.center), ("whiten", backend.prep.whiten),
              ("mu", backend.plda.mu), ("between", backend.plda.between),
              ("within", backend.plda.within), ("cohort", backend.cohort)]
    write_blob(path, BACKEND_MAGIC, header, arrays)


def read_backend(path) -> Backend:
    header, arrays = read_blob(path, BACKEND_MAGIC)
    prep = Preprocessor(arrays["center"], arrays["whiten"])
    plda = PldaModel(arrays["mu"], arrays["between"], arrays["within"])
    return Backend(prep, plda, arrays["cohort"], int(header["top_k"]))
