"""Figure rendering for the report path: DET curves, training loss,
2-D projections of sampled latent vectors, and posterior-uncertainty
against duration. Every function writes a PNG next to the delimited data
it visualizes.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .numerics import sym_eig


def plot_det_curve(points_by_system, path):
    """points_by_system: {label: [(p_miss, p_fa), ...]}."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, points in points_by_system.items():
        p_miss = [p[0] for p in points]
        p_fa = [p[1] for p in points]
        ax.plot(p_fa, p_miss, drawstyle="steps-post", label=label)
    ax.plot([0, 1], [0, 1], ls=":", c="gray", lw=0.8)
    ax.set_xlabel("false alarm rate")
    ax.set_ylabel("miss rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_curve(rows, path):
    """rows: (step, lr, loss, accuracy) tuples from the training loop."""
    rows = list(rows)
    steps = [r[0] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(steps, [r[2] for r in rows])
    ax1.set_xlabel("step")
    ax1.set_ylabel("cross-entropy")
    ax2.plot(steps, [r[3] for r in rows])
    ax2.set_xlabel("step")
    ax2.set_ylabel("batch accuracy")
    ax2.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_vector_scatter(vectors, labels, path, title=""):
    """Scatter of vectors projected onto their two leading principal
    directions, colored by label."""
    x = np.asarray(vectors, dtype=np.float64)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(1, x.shape[0])
    _, vecs = sym_eig(cov)
    proj = xc @ vecs[:, :2]
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(5, 5))
    for lab in np.unique(labels):
        sel = labels == lab
        ax.scatter(proj[sel, 0], proj[sel, 1], s=8, label=str(lab))
    ax.set_xlabel("pc 1")
    ax.set_ylabel("pc 2")
    if title:
        ax.set_title(title)
    if len(np.unique(labels)) <= 12:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_trace_vs_duration(rows, path):
    """rows: (utt_id, duration seconds, posterior covariance trace)."""
    rows = list(rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.scatter([r[1] for r in rows], [r[2] for r in rows], s=10)
    ax.set_xlabel("duration (s)")
    ax.set_ylabel("posterior covariance trace")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
