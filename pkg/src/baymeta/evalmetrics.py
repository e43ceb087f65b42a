"""Ranking metrics, optimal-threshold F1, and the coreset baseline pieces.

All metrics treat larger scores as more anomalous and label 1 as anomalous.
AUROC is the tie-aware rank statistic (ties count half), AUPRC is the area
under the step-wise precision-recall curve from a descending-score sweep,
and the F1 maximum scans exactly the distinct observed scores plus the
predict-nothing threshold -- F1 is piecewise constant between observed
scores, so that scan is exact.  Per-episode metrics aggregate as mean plus
standard error with the unbiased variance estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-d arrays")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y


def auroc(scores, labels) -> float:
    """Probability that a random anomaly outranks a random normal, ties half.

    Computed from average ranks (equivalent to exhaustive pair counting; the
    rank sums are integer multiples of one half, so the equivalence is exact
    in floating point).
    """
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = rankdata(s, method="average")
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(scores, labels) -> float:
    """Area under the step-wise precision-recall curve (no interpolation).

    Sweep thresholds down the distinct scores; each group of tied scores
    enters as one operating point and contributes (recall step) x precision.
    """
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    n_pred = np.arange(1, s.size + 1)
    # operating points: last index of each tied-score group
    group_ends = np.nonzero(np.diff(s_sorted))[0]
    idx = np.append(group_ends, s.size - 1)
    precision = tp[idx] / n_pred[idx]
    recall = tp[idx] / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def f1_optimal(scores, labels) -> tuple[float, float]:
    """Best F1 over thresholds with prediction rule ``s >= u``.

    Candidates are the distinct scores plus +inf (predict nothing, F1 = 0 by
    the 0/0 -> 0 convention).  Ties in F1 break toward the smallest
    threshold.  Returns ``(u_star, f1_star)``.
    """
    s, y = _validate(scores, labels)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    n_pos = int(y.sum())

    tp = np.cumsum(y_sorted)
    n_pred = np.arange(1, s.size + 1)
    group_ends = np.nonzero(np.diff(s_sorted))[0]
    idx = np.append(group_ends, s.size - 1)
    # F1 = 2 TP / (2 TP + FP + FN) = 2 TP / (n_pred + n_pos)
    f1 = 2.0 * tp[idx] / (n_pred[idx] + n_pos)

    best_f1 = 0.0  # +inf candidate: no predictions
    best_u = math.inf
    # candidates descend in threshold; keep the smallest maximizer -> >=
    for k in range(idx.size):
        if f1[k] >= best_f1:
            best_f1 = float(f1[k])
            best_u = float(s_sorted[idx[k]])
    return best_u, best_f1


# --------------------------------------------------------------------------
# coreset / nearest-neighbor baseline
# --------------------------------------------------------------------------

def kcenter_coreset(points: np.ndarray, fraction: float, seed: int = 0,
                    start: int | None = None) -> np.ndarray:
    """Greedy farthest-point subset of ceil(fraction * n) indices.

    Starts from a seeded point (or an explicit ``start`` index) and
    repeatedly adds the point farthest from the selected set -- the classic
    2-approximation to the optimal covering radius.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("points must be a non-empty (n, d) array")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = pts.shape[0]
    m = math.ceil(fraction * n)
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    selected = [start]
    min_dist = np.linalg.norm(pts - pts[start], axis=1)
    while len(selected) < m:
        nxt = int(np.argmax(min_dist))
        selected.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.array(sorted(selected))


def nn_score(coreset_points: np.ndarray, z: np.ndarray) -> float | np.ndarray:
    """Euclidean distance to the nearest coreset point."""
    pts = np.atleast_2d(np.asarray(coreset_points, dtype=float))
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = z[None, :] if single else z
    d = np.sqrt(np.sum((Z[:, None, :] - pts[None, :, :]) ** 2, axis=2)).min(axis=1)
    return float(d[0]) if single else d


# --------------------------------------------------------------------------
# per-episode aggregation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricSummary:
    mean: float
    stderr: float
    n_episodes: int


@dataclass(frozen=True)
class ScoreReport:
    """Episode-averaged metrics with standard errors."""

    auroc: MetricSummary
    auprc: MetricSummary
    f1_star: MetricSummary
    u_star_mean: float
    episode_count: int

    def as_rows(self, method: str, task_family: str, heldout: str) -> list[tuple]:
        rows = []
        for name, summary in (
            ("auroc", self.auroc), ("auprc", self.auprc), ("f1_star", self.f1_star),
        ):
            rows.append(
                (method, task_family, heldout, name,
                 summary.mean, summary.stderr, summary.n_episodes)
            )
        return rows


def _summary(values: list[float]) -> MetricSummary:
    arr = np.asarray(values, dtype=float)
    n = arr.size
    stderr = float(arr.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return MetricSummary(mean=float(arr.mean()), stderr=stderr, n_episodes=n)


def episode_report(per_episode: list[tuple[np.ndarray, np.ndarray]],
                   pooled: bool = False) -> ScoreReport:
    """Metrics over a list of (scores, labels) episode pairs.

    Default is per-episode computation averaged across episodes (paired with
    standard errors); ``pooled`` concatenates everything first and reports a
    single-episode summary instead.
    """
    if not per_episode:
        raise ValueError("no episodes to report")
    if pooled:
        scores = np.concatenate([s for s, _ in per_episode])
        labels = np.concatenate([y for _, y in per_episode])
        per_episode = [(scores, labels)]
    aurocs, auprcs, f1s, thresholds = [], [], [], []
    for scores, labels in per_episode:
        aurocs.append(auroc(scores, labels))
        auprcs.append(auprc(scores, labels))
        u, f1 = f1_optimal(scores, labels)
        f1s.append(f1)
        thresholds.append(u)
    finite_u = [u for u in thresholds if math.isfinite(u)]
    return ScoreReport(
        auroc=_summary(aurocs),
        auprc=_summary(auprcs),
        f1_star=_summary(f1s),
        u_star_mean=float(np.mean(finite_u)) if finite_u else math.inf,
        episode_count=len(per_episode),
    )


def score_histogram(scores: np.ndarray, bins: int = 30) -> list[tuple[float, float, int]]:
    """Binned score counts as (lo, hi, count) rows for CSV emission."""
    counts, edges = np.histogram(np.asarray(scores, dtype=float), bins=bins)
    return [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]
