"""Equal error rate, minimum normalized detection cost, and DET operating
points over scored trials.

Conventions (published numbers vary with these, so they are fixed here and
asserted by tests):
  * Operating points are the k+1 thresholds at the gaps of the k distinct
    scores, with acceptance at score >= threshold; the sweep always
    contains (P_miss, P_fa) = (0, 1) and (1, 0).
  * EER is the diagonal crossing of the convex hull of the operating
    points; randomized interpolation between two thresholds is admitted,
    which is what makes miss rate = false-alarm rate always attainable.
  * minDCF minimizes over the sweep's actual thresholds (no hull) and is
    normalized by the better of the accept-all / reject-all systems.
"""

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class ScoredTrials:
    scores: np.ndarray
    targets: np.ndarray     # bool per trial

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=bool)
        if self.scores.shape != self.targets.shape or self.scores.ndim != 1:
            raise ValueError("scores and targets must be matching 1-D arrays")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores contain non-finite values")

    @property
    def num_targets(self):
        return int(self.targets.sum())

    @property
    def num_nontargets(self):
        return int((~self.targets).sum())

    def require_both_classes(self):
        if self.num_targets == 0 or self.num_nontargets == 0:
            raise ValueError("need at least one target and one nontarget trial")


@dataclass
class DcfParams:
    c_miss: float = 1.0
    c_fa: float = 1.0
    p_target: float = 0.05

    def __post_init__(self):
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")
        if not 0.0 < self.p_target < 1.0:
            raise ValueError("target prior must be inside (0, 1)")


def det_points(trials: ScoredTrials):
    """(P_miss, P_fa) at every threshold gap, ordered by increasing
    threshold; point count = number of distinct scores + 1."""
    tgt = np.sort(trials.scores[trials.targets])
    non = np.sort(trials.scores[~trials.targets])
    distinct = np.unique(trials.scores)
    # Thresholds: below everything, between every adjacent distinct pair,
    # above everything. Acceptance is score >= threshold.
    points = [(0.0, 1.0)]
    nt, nn = len(tgt), len(non)
    for i in range(len(distinct)):
        if i + 1 < len(distinct):
            theta = 0.5 * (distinct[i] + distinct[i + 1])
        else:
            theta = distinct[i] + 1.0
        p_miss = np.searchsorted(tgt, theta, side="left") / nt if nt else 0.0
        p_fa = (nn - np.searchsorted(non, theta, side="left")) / nn if nn else 0.0
        points.append((float(p_miss), float(p_fa)))
    return points


def _lower_hull(points):
    """Lower convex hull of (x, y) points, left to right (monotone chain)."""
    pts = sorted(set(points))
    hull = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            cross = (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1)
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def eer(trials: ScoredTrials):
    """Diagonal crossing of the convex hull of the DET sweep."""
    trials.require_both_classes()
    pts = [(p_fa, p_miss) for p_miss, p_fa in det_points(trials)]
    hull = _lower_hull(pts)
    # Along the hull P_miss - P_fa strictly decreases from >= 0 at the
    # low-false-alarm end to <= 0 at (1, 0); find the sign change.
    prev = hull[0]
    prev_diff = prev[1] - prev[0]
    if prev_diff <= 0:
        # The very first hull point sits at P_fa = 0, so this only happens
        # with P_miss = 0 there too: perfect separation.
        return float(prev[0])
    for cur in hull[1:]:
        diff = cur[1] - cur[0]
        if diff <= 0:
            alpha = prev_diff / (prev_diff - diff)
            return float((1 - alpha) * prev[0] + alpha * cur[0])
        prev, prev_diff = cur, diff
    raise AssertionError("DET sweep must cross the diagonal")


def min_dcf(trials: ScoredTrials, params: DcfParams = None):
    trials.require_both_classes()
    if params is None:
        params = DcfParams()
    denom = min(params.c_miss * params.p_target, params.c_fa * (1.0 - params.p_target))
    best = np.inf
    for p_miss, p_fa in det_points(trials):
        cost = (params.c_miss * params.p_target * p_miss
                + params.c_fa * (1.0 - params.p_target) * p_fa)
        best = min(best, cost / denom)
    return float(best)


def metrics_report(trials: ScoredTrials, params: DcfParams = None):
    return {"eer": eer(trials), "min_dcf": min_dcf(trials, params),
            "num_target": trials.num_targets, "num_nontarget": trials.num_nontargets}


def write_metrics_json(trials: ScoredTrials, path, params: DcfParams = None):
    report = metrics_report(trials, params)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    return report


def write_det_csv(trials: ScoredTrials, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("p_miss,p_fa\n")
        for p_miss, p_fa in det_points(trials):
            f.write(f"{p_miss:.10g},{p_fa:.10g}\n")
