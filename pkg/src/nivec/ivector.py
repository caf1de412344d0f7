"""Total-variability extractor in augmented form.

Per component c the loading matrix Tfull_c is D x (R+1): column 0 holds the
component mean and moves during EM like every other column, the remaining R
columns span the latent subspace. The residual precision is one shared
diagonal. The latent posterior given utterance statistics (z, f) is
Gaussian with precision L = I + sum_c z_c T_c^T diag(lam) T_c and mean
w = L^{-1} sum_c T_c^T diag(lam) (f_c - z_c mu_c).

The per-iteration objective is the exact marginal log-likelihood of the
statistics under the model, which EM never decreases.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .blobio import read_blob, write_blob
from .numerics import cholesky, make_rng, solve_psd
from .suffstats import SufficientStats, stats_to_moments

EXTRACTOR_MAGIC = b"NIVT"

LAMBDA_FLOOR = 1e-8

INIT_COLUMN_SCALE = 0.01


@dataclass
class IVectorPosterior:
    mean: np.ndarray        # (R,)
    precision: np.ndarray   # (R, R) SPD

    def covariance(self):
        return solve_psd(self.precision, np.eye(self.precision.shape[0]))


class IVectorExtractor:
    def __init__(self, tfull, lam):
        self.tfull = np.asarray(tfull, dtype=np.float64)   # (C, D, R+1)
        self.lam = np.asarray(lam, dtype=np.float64)       # (D,)
        if self.tfull.ndim != 3:
            raise ValueError("tfull must be (C, D, R+1)")
        if self.lam.shape != (self.tfull.shape[1],):
            raise ValueError("lam must have one entry per feature dim")
        if np.any(self.lam <= 0):
            raise ValueError("residual precision must be positive")

    @property
    def num_components(self):
        return self.tfull.shape[0]

    @property
    def dim(self):
        return self.tfull.shape[1]

    @property
    def latent_dim(self):
        return self.tfull.shape[2] - 1

    @property
    def means(self):
        return self.tfull[:, :, 0]

    @property
    def basis(self):
        return self.tfull[:, :, 1:]

    def _check(self, stats: SufficientStats):
        if stats.num_components != self.num_components or stats.dim != self.dim:
            raise ValueError(
                f"stats ({stats.num_components}, {stats.dim}) do not match "
                f"extractor ({self.num_components}, {self.dim})")
        if not stats.diag:
            raise ValueError("extractor consumes diagonal second-order stats")


def init_extractor(train_stats: SufficientStats, latent_dim, rng=None, seed=0):
    """Column 0 from the training-set component means, residual precision
    from the count-weighted average diagonal covariance, latent columns
    i.i.d. Gaussian at scale 0.01."""
    moments = stats_to_moments(train_stats)
    if np.any(moments.empty):
        bad = np.flatnonzero(moments.empty).tolist()
        raise ValueError(f"components with no soft counts: {bad}")
    if not train_stats.diag:
        raise ValueError("extractor initialization needs diagonal stats")
    if rng is None:
        rng = make_rng(seed, "ivector", "init")
    c, d = moments.means.shape
    r = int(latent_dim)
    if r < 1:
        raise ValueError("latent dim must be >= 1")
    avg_cov = (train_stats.z[:, None] * moments.covs).sum(axis=0) / train_stats.z.sum()
    lam = 1.0 / np.maximum(avg_cov, LAMBDA_FLOOR)
    tfull = np.empty((c, d, r + 1))
    tfull[:, :, 0] = moments.means
    tfull[:, :, 1:] = INIT_COLUMN_SCALE * rng.standard_normal((c, d, r))
    return IVectorExtractor(tfull, lam)


def posterior(stats: SufficientStats, ext: IVectorExtractor) -> IVectorPosterior:
    ext._check(stats)
    r = ext.latent_dim
    basis = ext.basis
    prec = np.eye(r)
    b = np.zeros(r)
    for c in range(ext.num_components):
        lt = ext.lam[:, None] * basis[c]                   # diag(lam) T_c
        prec += stats.z[c] * basis[c].T @ lt
        b += lt.T @ (stats.f[c] - stats.z[c] * ext.means[c])
    mean = solve_psd(prec, b)
    return IVectorPosterior(mean, prec)


def extract_ivector(stats: SufficientStats, ext: IVectorExtractor):
    return posterior(stats, ext).mean


def posterior_trace(post: IVectorPosterior):
    """Total posterior variance, the uncertainty summary of an utterance."""
    return float(np.trace(post.covariance()))


def sample_ivectors(post: IVectorPosterior, n, rng):
    """n draws from N(mean, precision^{-1}), deterministic under rng."""
    if n < 1:
        raise ValueError("need n >= 1 draws")
    cov = post.covariance()
    chol = cholesky(0.5 * (cov + cov.T))
    eps = rng.standard_normal((int(n), post.mean.shape[0]))
    return post.mean + eps @ chol.T


def _marginal_loglik(stats, ext, post):
    """Exact log p(stats) with the latent integrated out (diagonal residual)."""
    lam, means = ext.lam, ext.means
    z, f, s = stats.z, stats.f, stats.s
    const = -0.5 * np.log(2.0 * np.pi) * ext.dim * z.sum() \
        + 0.5 * z.sum() * np.log(lam).sum()
    quad = -0.5 * (s.sum(axis=0) @ lam) \
        + np.einsum("cd,d,cd->", f, lam, means) \
        - 0.5 * np.einsum("c,cd,d->", z, means ** 2, lam)
    chol = cholesky(post.precision)
    logdet_l = 2.0 * np.sum(np.log(np.diag(chol)))
    b = post.precision @ post.mean
    return const + quad - 0.5 * logdet_l + 0.5 * b @ post.mean


def em_iterate(stats_list, ext: IVectorExtractor, ridge=1e-8):
    """One EM sweep; returns (updated extractor, marginal log-likelihood
    of the data under the extractor as it was BEFORE the update)."""
    if len(stats_list) < ext.latent_dim:
        warnings.warn(f"only {len(stats_list)} utterances for latent dim "
                      f"{ext.latent_dim}; the subspace estimate will be poor")
    c_num, d, r = ext.num_components, ext.dim, ext.latent_dim
    acc_a = np.zeros((c_num, r + 1, r + 1))
    acc_c = np.zeros((c_num, d, r + 1))
    total_z = 0.0
    objective = 0.0
    for stats in stats_list:
        post = posterior(stats, ext)
        objective += _marginal_loglik(stats, ext, post)
        cov = post.covariance()
        ea = np.concatenate([[1.0], post.mean])
        eaa = np.empty((r + 1, r + 1))
        eaa[0, 0] = 1.0
        eaa[0, 1:] = post.mean
        eaa[1:, 0] = post.mean
        eaa[1:, 1:] = cov + np.outer(post.mean, post.mean)
        acc_a += stats.z[:, None, None] * eaa
        acc_c += stats.f[:, :, None] * ea
        total_z += stats.z.sum()

    new_tfull = np.empty_like(ext.tfull)
    for c in range(c_num):
        a = acc_a[c]
        try:
            new_tfull[c] = solve_psd(a, acc_c[c].T).T
        except ValueError:
            warnings.warn(f"singular accumulator for component {c}; adding ridge")
            a = a + ridge * np.trace(a) / (r + 1) * np.eye(r + 1)
            new_tfull[c] = solve_psd(a, acc_c[c].T).T

    total_s = np.array([st.s for st in stats_list]).sum(axis=(0, 1))
    explained = np.einsum("cde,cde->d", new_tfull, acc_c)
    var = (total_s - explained) / total_z
    lam = 1.0 / np.maximum(var, LAMBDA_FLOOR)
    return IVectorExtractor(new_tfull, lam), objective


def train_extractor(stats_list, latent_dim, num_iters=5, rng=None, seed=0):
    """Initialize from pooled stats and run EM; returns (extractor,
    per-iteration marginal log-likelihoods)."""
    if not stats_list:
        raise ValueError("no statistics to train on")
    pooled = stats_list[0]
    for stats in stats_list[1:]:
        pooled = SufficientStats(pooled.z + stats.z, pooled.f + stats.f,
                                 pooled.s + stats.s,
                                 pooled.num_frames + stats.num_frames, pooled.diag)
    ext = init_extractor(pooled, latent_dim, rng=rng, seed=seed)
    objectives = []
    for _ in range(num_iters):
        ext, obj = em_iterate(stats_list, ext)
        objectives.append(obj)
    return ext, objectives


def write_extractor(ext: IVectorExtractor, path):
    header = {"kind": "ivector_extractor", "num_components": ext.num_components,
              "dim": ext.dim, "latent_dim": ext.latent_dim}
    write_blob(path, EXTRACTOR_MAGIC, header, [("tfull", ext.tfull), ("lam", ext.lam)])


def read_extractor(path) -> IVectorExtractor:
    _, arrays = read_blob(path, EXTRACTOR_MAGIC)
    return IVectorExtractor(arrays["tfull"], arrays["lam"])


def write_sampled_csv(path, utterance_ids, samples_per_utt):
    """Rows `utt_id,draw_index,coord0,...` for posterior draw diagnostics."""
    with open(path, "w", encoding="utf-8") as f:
        r = samples_per_utt[0].shape[1]
        f.write("utt_id,draw," + ",".join(f"w{i}" for i in range(r)) + "\n")
        for utt_id, draws in zip(utterance_ids, samples_per_utt):
            for i, row in enumerate(draws):
                f.write(f"{utt_id},{i}," + ",".join(f"{v:.10g}" for v in row) + "\n")


def write_trace_csv(path, rows):
    """Rows (utt_id, duration_seconds, posterior trace)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("utt_id,duration,trace\n")
        for utt_id, duration, trace in rows:
            f.write(f"{utt_id},{duration:.10g},{trace:.10g}\n")
