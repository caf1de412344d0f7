"""Zeroth, first and second order soft-count statistics of frame features
against a posterior matrix, the building blocks of the generative embedding
path. Second-order blocks are kept diagonal by default; the full matrices
are only needed for moment diagnostics.
"""

from dataclasses import dataclass

import numpy as np

from .blobio import read_blob, write_blob

STATS_MAGIC = b"NIVS"

EMPTY_EPS = 1e-10

COV_FLOOR_REL = 1e-6


@dataclass
class SufficientStats:
    z: np.ndarray          # (C,) soft counts
    f: np.ndarray          # (C, D) weighted sums
    s: np.ndarray          # (C, D) diagonal or (C, D, D) full second moments
    num_frames: int
    diag: bool = True

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.f = np.asarray(self.f, dtype=np.float64)
        self.s = np.asarray(self.s, dtype=np.float64)
        c, d = self.f.shape
        if self.z.shape != (c,):
            raise ValueError("z must have one entry per component")
        want = (c, d) if self.diag else (c, d, d)
        if self.s.shape != want:
            raise ValueError(f"second-order stats must have shape {want}, got {self.s.shape}")

    @property
    def num_components(self):
        return self.z.shape[0]

    @property
    def dim(self):
        return self.f.shape[1]

    @classmethod
    def zeros(cls, num_components, dim, diag=True):
        s_shape = (num_components, dim) if diag else (num_components, dim, dim)
        return cls(np.zeros(num_components), np.zeros((num_components, dim)),
                   np.zeros(s_shape), 0, diag)


def accumulate_stats(x, gamma, diag=True) -> SufficientStats:
    """z_c = sum_t gamma, f_c = sum_t gamma x_t, S_c = sum_t gamma x_t x_t^T."""
    frames = getattr(x, "frames", x)
    frames = np.asarray(frames, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if frames.ndim != 2 or gamma.ndim != 2 or frames.shape[0] != gamma.shape[0]:
        raise ValueError(
            f"frames {frames.shape} and posteriors {gamma.shape} must share the time axis")
    t = frames.shape[0]
    z = gamma.sum(axis=0)
    f = gamma.T @ frames
    if diag:
        s = gamma.T @ (frames ** 2)
    else:
        s = np.einsum("tc,td,te->cde", gamma, frames, frames)
    return SufficientStats(z, f, s, t, diag)


def merge_stats(a: SufficientStats, b: SufficientStats) -> SufficientStats:
    if a.num_components != b.num_components or a.dim != b.dim or a.diag != b.diag:
        raise ValueError("cannot merge statistics with different shapes")
    return SufficientStats(a.z + b.z, a.f + b.f, a.s + b.s,
                           a.num_frames + b.num_frames, a.diag)


@dataclass
class ComponentMoments:
    means: np.ndarray      # (C, D)
    covs: np.ndarray       # (C, D) diagonal or (C, D, D)
    empty: np.ndarray      # (C,) bool, True where z_c was too small
    diag: bool


def stats_to_moments(stats: SufficientStats, empty_eps=EMPTY_EPS) -> ComponentMoments:
    """Per-component weighted mean and covariance with a PSD floor.

    Covariance eigenvalues (diagonal entries in diag mode) are floored at
    1e-6 * trace / D; components with z_c <= empty_eps are flagged and get
    zero mean and floor-level covariance.
    """
    c, d = stats.f.shape
    empty = stats.z <= empty_eps
    zsafe = np.where(empty, 1.0, stats.z)
    means = np.where(empty[:, None], 0.0, stats.f / zsafe[:, None])
    if stats.diag:
        covs = stats.s / zsafe[:, None] - means ** 2
        trace = covs.sum(axis=1)
        floor = np.maximum(COV_FLOOR_REL * trace / d, COV_FLOOR_REL)
        covs = np.maximum(covs, floor[:, None])
        covs[empty] = COV_FLOOR_REL
    else:
        covs = stats.s / zsafe[:, None, None] - np.einsum("cd,ce->cde", means, means)
        for i in range(c):
            if empty[i]:
                covs[i] = COV_FLOOR_REL * np.eye(d)
                continue
            sym = 0.5 * (covs[i] + covs[i].T)
            vals, vecs = np.linalg.eigh(sym)
            floor = max(COV_FLOOR_REL * vals.sum() / d, COV_FLOOR_REL)
            covs[i] = (vecs * np.maximum(vals, floor)) @ vecs.T
    return ComponentMoments(means, covs, empty, stats.diag)


def write_stats(stats: SufficientStats, path):
    header = {"kind": "suffstats", "num_components": stats.num_components,
              "dim": stats.dim, "diag": stats.diag, "num_frames": int(stats.num_frames)}
    write_blob(path, STATS_MAGIC, header, [("z", stats.z), ("f", stats.f), ("s", stats.s)])


def read_stats(path) -> SufficientStats:
    header, arrays = read_blob(path, STATS_MAGIC)
    return SufficientStats(arrays["z"], arrays["f"], arrays["s"],
                           int(header["num_frames"]), bool(header["diag"]))
