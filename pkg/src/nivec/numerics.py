"""Shared dense linear algebra and numerically safe primitives.

All core math runs in float64; 32-bit floats appear only in on-disk
feature files. Random streams are PCG64 generators derived from a base
seed plus string/int tags, so every module draws from its own
reproducible substream.
"""

import hashlib

import numpy as np
import scipy.linalg


def as_matrix(a, name="matrix"):
    """Coerce to a finite 2-D float64 array, raising on bad input."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def stable_softmax(logits, axis=-1):
    """Softmax with max-subtraction.

    Subtracting the row maximum keeps exp() in range even for the large
    logits that show up early in training, and makes the result exactly
    invariant to adding a constant to all logits.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax of empty input")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input contains non-finite entries")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def check_symmetric(a, tol=1e-10, name="matrix"):
    m = as_matrix(a, name)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))))
    if np.max(np.abs(m - m.T)) > tol * scale:
        raise ValueError(f"{name} is not symmetric within {tol}")
    return m


def cholesky(spd):
    """Lower-triangular Cholesky factor of a symmetric positive definite matrix.

    Raises ValueError naming the failing pivot index when the input is
    not positive definite.
    """
    m = check_symmetric(spd, name="cholesky input")
    try:
        return scipy.linalg.cholesky(m, lower=True)
    except scipy.linalg.LinAlgError as exc:
        # LAPACK reports the order of the first non-positive leading minor.
        msg = str(exc)
        pivot = msg.split("-th")[0] if "-th" in msg else "?"
        raise ValueError(
            f"matrix is not positive definite (failing pivot index {pivot})"
        ) from exc


def sym_eig(sym):
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted in
    descending order and eigenvectors in matching columns.
    """
    m = check_symmetric(sym, name="sym_eig input")
    vals, vecs = np.linalg.eigh(m)
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order]


def solve_psd(a, b):
    """Solve a x = b for symmetric positive definite a via Cholesky."""
    L = cholesky(a)
    y = scipy.linalg.solve_triangular(L, b, lower=True)
    return scipy.linalg.solve_triangular(L.T, y, lower=False)


def _tag_to_ints(tag):
    if isinstance(tag, (int, np.integer)):
        return [int(tag) & 0xFFFFFFFF]
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    # Two 32-bit words are plenty of entropy per tag.
    return [int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:8], "little")]


def make_rng(seed, *tags):
    """Deterministic PCG64 generator for the substream named by tags.

    Identical (seed, tags) always yields an identical stream; distinct
    tags yield statistically independent streams. Tags may be strings or
    integers (utterance indices, module names, ...).
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for tag in tags:
        entropy.extend(_tag_to_ints(tag))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
