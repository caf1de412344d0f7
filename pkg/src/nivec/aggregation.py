"""Temporal aggregation: GMM component posteriors, dictionary-based
supervector heads (learnable dictionary encoding, VLAD-style encoding and
their hybrid), and mean+std pooling, each with an analytic backward pass.

The dictionary posteriors are softmax families that reduce exactly to
Bayes posteriors of constrained GMMs:
  * VLAD-style affine logits w_c^T x + psi_c equal the posterior of a GMM
    whose components share one full covariance, via omega_c = inv(S) mu_c,
    psi_c = log w_c - mu_c^T inv(S) mu_c / 2.
  * Dictionary logits -s_c ||x - mu_c||^2 / 2 + beta_c equal the posterior
    of an isotropic GMM via s_c = 1 / sigma_c^2,
    beta_c = log w_c - (D/2) log(2 pi sigma_c^2).
Those reductions are shipped as constructors and exercised by tests.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .numerics import cholesky, stable_softmax
from .frame_net import Layer, register_layer

AGG_EPS = 1e-9

ROW_SUM_TOL = 1e-10


def _frames(x):
    frames = getattr(x, "frames", x)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError(f"expected a (T, D) frame matrix, got shape {frames.shape}")
    return frames


@dataclass
class GmmFullParams:
    """Full-covariance mixture: weights on the simplex, means, SPD covariances."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        c, d = self.means.shape
        if self.weights.shape != (c,) or self.covs.shape != (c, d, d):
            raise ValueError("inconsistent mixture shapes")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights <= 0):
            raise ValueError("weights must be positive and sum to 1 within 1e-12")

    @property
    def num_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]


@dataclass
class LdeParams:
    """Dictionary posterior parameters; positive scales kept in log domain."""

    centroids: np.ndarray
    beta: np.ndarray
    variant: str = "isotropic"
    log_s: np.ndarray = None
    log_d: np.ndarray = None

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        c, d = self.centroids.shape
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.beta.shape != (c,):
            raise ValueError("beta must have one entry per centroid")
        if self.variant == "isotropic":
            if self.log_s is None:
                raise ValueError("isotropic variant requires log_s")
            self.log_s = np.asarray(self.log_s, dtype=np.float64)
            if self.log_s.shape != (c,):
                raise ValueError("log_s must have one entry per centroid")
        elif self.variant == "shared_diagonal":
            if self.log_d is None:
                raise ValueError("shared_diagonal variant requires log_d")
            self.log_d = np.asarray(self.log_d, dtype=np.float64)
            if self.log_d.shape != (d,):
                raise ValueError("log_d must have one entry per feature")
        else:
            raise ValueError(f"unknown variant {self.variant!r}")

    @classmethod
    def isotropic(cls, centroids, s, beta):
        return cls(centroids, beta, "isotropic", log_s=np.log(np.asarray(s, dtype=np.float64)))

    @classmethod
    def shared_diagonal(cls, centroids, d, beta):
        return cls(centroids, beta, "shared_diagonal",
                   log_d=np.log(np.asarray(d, dtype=np.float64)))


@dataclass
class NetVladParams:
    """Affine-softmax posterior (omega, psi) plus residual centroids."""

    omega: np.ndarray
    psi: np.ndarray
    centroids: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self.psi = np.asarray(self.psi, dtype=np.float64)
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        c, d = self.omega.shape
        if self.psi.shape != (c,) or self.centroids.shape != (c, d):
            raise ValueError("inconsistent parameter shapes")


def lde_params_from_gmm(weights, means, sigma2) -> LdeParams:
    """Dictionary parameters whose posterior equals an isotropic GMM's."""
    weights = np.asarray(weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), weights.shape).copy()
    d = means.shape[1]
    beta = np.log(weights) - 0.5 * d * np.log(2.0 * np.pi * sigma2)
    return LdeParams.isotropic(means, 1.0 / sigma2, beta)


def netvlad_params_from_gmm(weights, means, shared_cov) -> NetVladParams:
    """Affine-softmax parameters whose posterior equals a shared-covariance GMM's."""
    weights = np.asarray(weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    lam_mu = np.linalg.solve(np.asarray(shared_cov, dtype=np.float64), means.T).T
    psi = np.log(weights) - 0.5 * np.einsum("cd,cd->c", means, lam_mu)
    return NetVladParams(lam_mu, psi, means)


def check_posterior_rows(gamma, tol=ROW_SUM_TOL):
    if np.any(gamma < 0):
        raise ValueError("posterior matrix has negative entries")
    err = np.max(np.abs(gamma.sum(axis=-1) - 1.0))
    if err > tol:
        raise ValueError(f"posterior rows deviate from the simplex by {err:.3e}")


def gmm_posterior_full(x, p: GmmFullParams):
    """Bayes posteriors from per-component Gaussian densities (direct route)."""
    x = _frames(x)
    if x.shape[1] != p.dim:
        raise ValueError(f"frame dim {x.shape[1]} does not match mixture dim {p.dim}")
    t, d = x.shape
    logits = np.empty((t, p.num_components))
    for c in range(p.num_components):
        try:
            chol = cholesky(p.covs[c])
        except ValueError as exc:
            raise ValueError(f"component {c} covariance is singular: {exc}") from exc
        diff = solve_triangular(chol, (x - p.means[c]).T, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        logits[:, c] = (np.log(p.weights[c])
                        - 0.5 * np.sum(diff * diff, axis=0)
                        - 0.5 * logdet - 0.5 * d * np.log(2.0 * np.pi))
    return stable_softmax(logits, axis=1)


def gmm_posterior_expanded(x, p: GmmFullParams):
    """Same posteriors through the expanded quadratic-linear-constant form."""
    x = _frames(x)
    t, d = x.shape
    logits = np.empty((t, p.num_components))
    for c in range(p.num_components):
        chol = cholesky(p.covs[c])
        eye = np.eye(d)
        half = solve_triangular(chol, eye, lower=True)
        lam = half.T @ half
        a = lam @ p.means[c]
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        const = (np.log(p.weights[c]) - 0.5 * p.means[c] @ a
                 - 0.5 * logdet - 0.5 * d * np.log(2.0 * np.pi))
        logits[:, c] = -0.5 * np.einsum("td,de,te->t", x, lam, x) + x @ a + const
    return stable_softmax(logits, axis=1)


def _lde_logits(x3, centroids, beta, s=None, d_vec=None):
    """Batched (B, T, C) logits for both dictionary variants."""
    if d_vec is None:
        sq = ((x3 ** 2).sum(axis=2, keepdims=True)
              - 2.0 * x3 @ centroids.T + (centroids ** 2).sum(axis=1))
        return -0.5 * s * sq + beta, sq
    sq = ((x3 ** 2) @ d_vec)[:, :, None] - 2.0 * x3 @ (d_vec * centroids).T \
        + (centroids ** 2) @ d_vec
    return -0.5 * sq + beta, sq


def lde_posterior(x, p: LdeParams):
    x = _frames(x)
    if x.shape[1] != p.centroids.shape[1]:
        raise ValueError("frame dim does not match centroid dim")
    if p.variant == "isotropic":
        logits, _ = _lde_logits(x[None], p.centroids, p.beta, s=np.exp(p.log_s))
    else:
        logits, _ = _lde_logits(x[None], p.centroids, p.beta, d_vec=np.exp(p.log_d))
    return stable_softmax(logits[0], axis=1)


def netvlad_posterior(x, p: NetVladParams):
    x = _frames(x)
    if x.shape[1] != p.omega.shape[1]:
        raise ValueError("frame dim does not match projection dim")
    return stable_softmax(x @ p.omega.T + p.psi, axis=1)


def lde_aggregate(x, gamma, centroids):
    """Per-cluster posterior-weighted residual means, flattened to C*D."""
    x = _frames(x)
    gamma = np.asarray(gamma, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if gamma.shape != (x.shape[0], centroids.shape[0]):
        raise ValueError("posterior shape does not match frames/centroids")
    z = gamma.sum(axis=0)
    v = z[:, None] * centroids - gamma.T @ x
    return (v / (z + AGG_EPS)[:, None]).reshape(-1)


def netvlad_aggregate(x, gamma, centroids):
    """Residual sums, normalized per cluster and then globally."""
    x = _frames(x)
    gamma = np.asarray(gamma, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if gamma.shape != (x.shape[0], centroids.shape[0]):
        raise ValueError("posterior shape does not match frames/centroids")
    z = gamma.sum(axis=0)
    v = z[:, None] * centroids - gamma.T @ x
    norms = np.sqrt((v ** 2).sum(axis=1))
    m = (v / np.maximum(norms, AGG_EPS)[:, None]).reshape(-1)
    return m / max(np.linalg.norm(m), AGG_EPS)


def hybrid_aggregate(x, p: NetVladParams):
    """Affine-softmax posteriors feeding the dictionary-style aggregation."""
    return lde_aggregate(x, netvlad_posterior(x, p), p.centroids)


def mean_std_pool(x):
    x = _frames(x)
    return np.concatenate([x.mean(axis=0), np.sqrt(x.var(axis=0) + AGG_EPS)])


def _softmax_backward(gamma, dgamma):
    return gamma * (dgamma - (dgamma * gamma).sum(axis=-1, keepdims=True))


def _residual_sums(x3, gamma):
    """z[b,c] and v[b,c,:] = sum_t gamma (mu_c - x_t) given centroids later."""
    z = gamma.sum(axis=1)
    gx = np.einsum("btc,btd->bcd", gamma, x3)
    return z, gx


@register_layer("mean_std_pool")
class MeanStdPool(Layer):
    """(B, T, D) -> (B, 2D): temporal mean and epsilon-floored std."""

    def __init__(self, dim):
        super().__init__()
        self.dim = int(dim)
        self.out_dim = 2 * self.dim

    def config(self):
        return {"kind": self.kind, "dim": self.dim}

    def forward(self, x, train=False):
        if x.shape[-1] != self.dim:
            raise ValueError(f"mean_std_pool expects feature dim {self.dim}, got {x.shape[-1]}")
        mean = x.mean(axis=1)
        std = np.sqrt(((x - mean[:, None, :]) ** 2).mean(axis=1) + AGG_EPS)
        self._tape = {"x": x, "mean": mean, "std": std}
        return np.concatenate([mean, std], axis=1)

    def backward(self, dy):
        tape = self._take_tape()
        x, mean, std = tape["x"], tape["mean"], tape["std"]
        t = x.shape[1]
        dmean, dstd = dy[:, :self.dim], dy[:, self.dim:]
        dvar = dstd / (2.0 * std)
        return dmean[:, None, :] / t + (2.0 / t) * dvar[:, None, :] * (x - mean[:, None, :])


@register_layer("lde_head")
class LdeHead(Layer):
    """Trainable dictionary encoder: softmax over scaled distances to
    centroids, then per-cluster residual means (epsilon-guarded division,
    no global normalization)."""

    no_decay = frozenset({"beta"})

    def __init__(self, dim, num_clusters, variant="isotropic", include_bias=True, rng=None):
        super().__init__()
        if variant not in ("isotropic", "shared_diagonal"):
            raise ValueError(f"unknown variant {variant!r}")
        self.dim, self.num_clusters = int(dim), int(num_clusters)
        self.variant = variant
        self.include_bias = bool(include_bias)
        self.out_dim = self.num_clusters * self.dim
        init = rng.standard_normal if rng is not None else lambda shape: np.zeros(shape)
        self.params["centroids"] = init((self.num_clusters, self.dim))
        if variant == "isotropic":
            self.params["log_s"] = np.zeros(self.num_clusters)
        else:
            self.params["log_d"] = np.zeros(self.dim)
        if include_bias:
            self.params["beta"] = np.zeros(self.num_clusters)

    def config(self):
        return {"kind": self.kind, "dim": self.dim, "num_clusters": self.num_clusters,
                "variant": self.variant, "include_bias": self.include_bias}

    def posterior_params(self) -> LdeParams:
        beta = self.params.get("beta", np.zeros(self.num_clusters))
        if self.variant == "isotropic":
            return LdeParams(self.params["centroids"].copy(), beta.copy(),
                             "isotropic", log_s=self.params["log_s"].copy())
        return LdeParams(self.params["centroids"].copy(), beta.copy(),
                         "shared_diagonal", log_d=self.params["log_d"].copy())

    def forward(self, x, train=False):
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ValueError(f"lde_head expects (B, T, {self.dim}), got shape {x.shape}")
        mu = self.params["centroids"]
        beta = self.params.get("beta", 0.0)
        if self.variant == "isotropic":
            s = np.exp(self.params["log_s"])
            logits, sq = _lde_logits(x, mu, beta, s=s)
        else:
            s = np.exp(self.params["log_d"])
            logits, sq = _lde_logits(x, mu, beta, d_vec=s)
        gamma = stable_softmax(logits, axis=2)
        z, gx = _residual_sums(x, gamma)
        v = z[:, :, None] * mu - gx
        m = v / (z + AGG_EPS)[:, :, None]
        self._tape = {"x": x, "gamma": gamma, "sq": sq, "z": z, "v": v, "m": m, "scale": s}
        return m.reshape(x.shape[0], self.out_dim)

    def backward(self, dy):
        tape = self._take_tape()
        x, gamma, sq = tape["x"], tape["gamma"], tape["sq"]
        z, v, m, s = tape["z"], tape["v"], tape["m"], tape["scale"]
        mu = self.params["centroids"]
        b = x.shape[0]
        dm = dy.reshape(b, self.num_clusters, self.dim)

        zg = (z + AGG_EPS)[:, :, None]
        dv = dm / zg
        dz = -(dm * m).sum(axis=2) / (z + AGG_EPS)

        # v[b,c] = z[b,c] mu_c - sum_t gamma x_t; z = sum_t gamma
        dgamma = dz[:, :, None] + np.einsum("bcd,cd->bc", dv, mu)[:, :, None]
        dgamma = dgamma.transpose(0, 2, 1) - np.matmul(x, dv.transpose(0, 2, 1))
        dmu = np.einsum("bc,bcd->cd", z, dv)
        dx = -np.matmul(gamma, dv)

        dlogits = _softmax_backward(gamma, dgamma)
        if self.include_bias:
            self.grads["beta"] = dlogits.sum(axis=(0, 1))
        dsq = -0.5 * dlogits * (s if self.variant == "isotropic" else 1.0)
        if self.variant == "isotropic":
            self.grads["log_s"] = -0.5 * (dlogits * sq).sum(axis=(0, 1)) * s
            # sq[b,t,c] = ||x - mu_c||^2
            row = dsq.sum(axis=2, keepdims=True)
            dx += 2.0 * (row * x - dsq @ mu)
            dmu += 2.0 * (dsq.sum(axis=(0, 1))[:, None] * mu
                          - np.einsum("btc,btd->cd", dsq, x))
        else:
            d_vec = s
            row = dsq.sum(axis=2)
            g_cj = np.einsum("btc,btj->cj", dsq, x)
            col = dsq.sum(axis=(0, 1))
            dd = (np.einsum("bt,btj->j", row, x ** 2)
                  - 2.0 * (g_cj * mu).sum(axis=0) + col @ (mu ** 2))
            self.grads["log_d"] = dd * d_vec
            dx += 2.0 * d_vec * (row[:, :, None] * x - dsq @ mu)
            dmu += 2.0 * d_vec * (col[:, None] * mu - g_cj)
        self.grads["centroids"] = dmu
        return dx


def _norm_backward(v, du, norms, axis):
    """Backward of u = v / max(||v||, eps) along axis.

    Above the floor the usual projection rule applies; at or below it the
    map is linear in v, so the gradient is just du / eps.
    """
    dot = (du * v).sum(axis=axis, keepdims=True)
    n = np.expand_dims(norms, axis)
    guarded = np.maximum(n, AGG_EPS)
    grad = du / guarded - v * dot / guarded ** 3
    return np.where(n > AGG_EPS, grad, du / AGG_EPS)


@register_layer("netvlad_head")
class NetVladHead(Layer):
    """Affine-softmax posteriors, residual sums, per-cluster and global
    length normalization."""

    no_decay = frozenset({"psi"})

    def __init__(self, dim, num_clusters, rng=None):
        super().__init__()
        self.dim, self.num_clusters = int(dim), int(num_clusters)
        self.out_dim = self.num_clusters * self.dim
        if rng is None:
            self.params["omega"] = np.zeros((self.num_clusters, self.dim))
            self.params["centroids"] = np.zeros((self.num_clusters, self.dim))
        else:
            self.params["omega"] = rng.standard_normal(
                (self.num_clusters, self.dim)) / np.sqrt(self.dim)
            self.params["centroids"] = rng.standard_normal((self.num_clusters, self.dim))
        self.params["psi"] = np.zeros(self.num_clusters)

    def config(self):
        return {"kind": self.kind, "dim": self.dim, "num_clusters": self.num_clusters}

    def posterior_params(self) -> NetVladParams:
        return NetVladParams(self.params["omega"].copy(), self.params["psi"].copy(),
                             self.params["centroids"].copy())

    def forward(self, x, train=False):
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ValueError(f"netvlad_head expects (B, T, {self.dim}), got shape {x.shape}")
        mu = self.params["centroids"]
        gamma = stable_softmax(x @ self.params["omega"].T + self.params["psi"], axis=2)
        z, gx = _residual_sums(x, gamma)
        v = z[:, :, None] * mu - gx
        cluster_norms = np.sqrt((v ** 2).sum(axis=2))
        u = v / np.maximum(cluster_norms, AGG_EPS)[:, :, None]
        m = u.reshape(x.shape[0], self.out_dim)
        global_norms = np.sqrt((m ** 2).sum(axis=1))
        out = m / np.maximum(global_norms, AGG_EPS)[:, None]
        self._tape = {"x": x, "gamma": gamma, "z": z, "v": v,
                      "cluster_norms": cluster_norms, "m": m, "global_norms": global_norms}
        return out

    def backward(self, dy):
        tape = self._take_tape()
        x, gamma, z, v = tape["x"], tape["gamma"], tape["z"], tape["v"]
        mu = self.params["centroids"]
        b = x.shape[0]

        dm = _norm_backward(tape["m"], dy, tape["global_norms"], axis=1)
        du = dm.reshape(b, self.num_clusters, self.dim)
        dv = _norm_backward(v, du, tape["cluster_norms"], axis=2)

        dgamma = np.einsum("bcd,cd->bc", dv, mu)[:, None, :] - np.matmul(x, dv.transpose(0, 2, 1))
        dmu = np.einsum("bc,bcd->cd", z, dv)
        dx = -np.matmul(gamma, dv)

        dlogits = _softmax_backward(gamma, dgamma)
        self.grads["omega"] = np.einsum("btc,btd->cd", dlogits, x)
        self.grads["psi"] = dlogits.sum(axis=(0, 1))
        self.grads["centroids"] = dmu
        return dx + dlogits @ self.params["omega"]


@register_layer("hybrid_head")
class HybridHead(Layer):
    """Affine-softmax posteriors with dictionary-style aggregation
    (epsilon-guarded residual means, no length normalization)."""

    no_decay = frozenset({"psi"})

    def __init__(self, dim, num_clusters, rng=None):
        super().__init__()
        self.dim, self.num_clusters = int(dim), int(num_clusters)
        self.out_dim = self.num_clusters * self.dim
        if rng is None:
            self.params["omega"] = np.zeros((self.num_clusters, self.dim))
            self.params["centroids"] = np.zeros((self.num_clusters, self.dim))
        else:
            self.params["omega"] = rng.standard_normal(
                (self.num_clusters, self.dim)) / np.sqrt(self.dim)
            self.params["centroids"] = rng.standard_normal((self.num_clusters, self.dim))
        self.params["psi"] = np.zeros(self.num_clusters)

    def config(self):
        return {"kind": self.kind, "dim": self.dim, "num_clusters": self.num_clusters}

    def posterior_params(self) -> NetVladParams:
        return NetVladParams(self.params["omega"].copy(), self.params["psi"].copy(),
                             self.params["centroids"].copy())

    def forward(self, x, train=False):
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ValueError(f"hybrid_head expects (B, T, {self.dim}), got shape {x.shape}")
        mu = self.params["centroids"]
        gamma = stable_softmax(x @ self.params["omega"].T + self.params["psi"], axis=2)
        z, gx = _residual_sums(x, gamma)
        v = z[:, :, None] * mu - gx
        m = v / (z + AGG_EPS)[:, :, None]
        self._tape = {"x": x, "gamma": gamma, "z": z, "v": v, "m": m}
        return m.reshape(x.shape[0], self.out_dim)

    def backward(self, dy):
        tape = self._take_tape()
        x, gamma, z, v, m = tape["x"], tape["gamma"], tape["z"], tape["v"], tape["m"]
        mu = self.params["centroids"]
        b = x.shape[0]
        dm = dy.reshape(b, self.num_clusters, self.dim)

        dv = dm / (z + AGG_EPS)[:, :, None]
        dz = -(dm * m).sum(axis=2) / (z + AGG_EPS)
        dgamma = (dz + np.einsum("bcd,cd->bc", dv, mu))[:, None, :] \
            - np.matmul(x, dv.transpose(0, 2, 1))
        dmu = np.einsum("bc,bcd->cd", z, dv)
        dx = -np.matmul(gamma, dv)

        dlogits = _softmax_backward(gamma, dgamma)
        self.grads["omega"] = np.einsum("btc,btd->cd", dlogits, x)
        self.grads["psi"] = dlogits.sum(axis=(0, 1))
        self.grads["centroids"] = dmu
        return dx + dlogits @ self.params["omega"]


AGGREGATION_KINDS = ("meanstd", "lde-iso", "lde-shared-diag", "netvlad", "hybrid")


def build_aggregation_head(kind, dim, num_clusters=64, rng=None):
    kind = kind.replace("_", "-")
    if kind == "meanstd":
        return MeanStdPool(dim)
    if kind == "lde-iso":
        return LdeHead(dim, num_clusters, "isotropic", rng=rng)
    if kind == "lde-shared-diag":
        return LdeHead(dim, num_clusters, "shared_diagonal", rng=rng)
    if kind == "netvlad":
        return NetVladHead(dim, num_clusters, rng=rng)
    if kind == "hybrid":
        return HybridHead(dim, num_clusters, rng=rng)
    raise ValueError(f"unknown aggregation kind {kind!r} (expected one of {AGGREGATION_KINDS})")
