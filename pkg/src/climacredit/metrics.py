"""Ranking metrics (AUC, KS, H-measure), bootstrap summaries and rank correlation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import betainc
from scipy.stats import rankdata

from .autodiff import Rng

logger = logging.getLogger(__name__)

METRICS = ("AUC", "KS", "H")


class MetricError(ValueError):
    pass


class SingleClass(MetricError):
    pass


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    pos = y == 1
    n1 = int(pos.sum())
    n0 = s.size - n1
    if n1 == 0 or n0 == 0:
        raise SingleClass("both classes must be present")
    return s, pos, n1, n0


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    s, pos, n1, n0 = _split(scores, labels)
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def ks(scores, labels) -> float:
    s, pos, n1, n0 = _split(scores, labels)
    order = np.argsort(s, kind="mergesort")
    s_sorted, pos_sorted = s[order], pos[order]
    cum_pos = np.cumsum(pos_sorted)
    cum_neg = np.cumsum(~pos_sorted)
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    gap = np.abs(cum_pos[last] / n1 - cum_neg[last] / n0)
    return float(gap.max())


def roc_points(scores, labels):
    """(FPR, TPR) at every distinct threshold, from (0,0) up to (1,1)."""
    s, pos, n1, n0 = _split(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, pos_sorted = s[order], pos[order]
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp = np.cumsum(pos_sorted)[last]
    fp = np.cumsum(~pos_sorted)[last]
    return np.r_[0.0, fp / n0], np.r_[0.0, tp / n1], n1, n0


def roc_hull(fpr, tpr):
    """Upper convex hull of the ROC points (monotone chain), (0,0) to (1,1)."""
    x = np.r_[0.0, np.asarray(fpr, dtype=np.float64), 1.0]
    y = np.r_[0.0, np.asarray(tpr, dtype=np.float64), 1.0]
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    # Within a run of equal TPR only the leftmost point can sit on the upper hull.
    keep = np.r_[True, y[1:] != y[:-1]]
    keep[-1] = True
    hx: list[float] = []
    hy: list[float] = []
    for px, py in zip(x[keep].tolist(), y[keep].tolist()):
        while len(hx) >= 2 and (hx[-1] - hx[-2]) * (py - hy[-2]) - (hy[-1] - hy[-2]) * (px - hx[-2]) >= 0:
            hx.pop()
            hy.pop()
        hx.append(px)
        hy.append(py)
    return np.array(hx), np.array(hy)


def _expected_min_loss(hx, hy, pi0, pi1) -> float:
    """Integral over c ~ Beta(pi1+1, pi0+1) of the minimum loss on the hull.

    Loss at ROC point (f, t): c*pi0*f + (1-c)*pi1*(1-t). Hull vertex k is
    optimal between the indifference costs of its two neighbouring edges.
    """
    a, b = pi1 + 1.0, pi0 + 1.0
    df, dt = np.diff(hx), np.diff(hy)
    with np.errstate(divide="ignore", invalid="ignore"):
        cuts = np.where(pi1 * dt + pi0 * df > 0, pi1 * dt / (pi1 * dt + pi0 * df), 0.0)
    # Vertex k (ascending FPR) is optimal for c in [cuts[k], cuts[k-1]].
    upper = np.r_[1.0, cuts]
    lower = np.r_[cuts, 0.0]
    intercept = pi1 * (1.0 - hy)
    slope = pi0 * hx - pi1 * (1.0 - hy)
    mass = betainc(a, b, upper) - betainc(a, b, lower)
    first_moment = a / (a + b) * (betainc(a + 1.0, b, upper) - betainc(a + 1.0, b, lower))
    return float(np.sum(intercept * mass + slope * first_moment))


def h_measure(scores, labels) -> float:
    fpr, tpr, n1, n0 = roc_points(scores, labels)
    pi1 = n1 / (n1 + n0)
    pi0 = 1.0 - pi1
    hx, hy = roc_hull(fpr, tpr)
    loss = _expected_min_loss(hx, hy, pi0, pi1)
    loss_max = _expected_min_loss(np.array([0.0, 1.0]), np.array([0.0, 1.0]), pi0, pi1)
    return float(min(max(1.0 - loss / loss_max, 0.0), 1.0))


METRIC_FUNCS = {"AUC": auc, "KS": ks, "H": h_measure}


# -- bootstrap ---------------------------------------------------------------


@dataclass
class MetricSummary:
    metric: str
    mean: float
    ci_low: float
    ci_high: float
    estimates: np.ndarray

    @property
    def n(self) -> int:
        return int(self.estimates.size)


def bootstrap_summary(
    runs,
    resamples: int = 1000,
    master_seed: int = 0,
    metrics=METRICS,
    max_redraws: int = 100,
) -> dict[str, MetricSummary]:
    """Pool ``resamples`` bootstrap estimates from each (scores, labels) run.

    ``runs`` holds one prediction vector per training seed; each run is
    resampled with replacement on its own substream. Resamples missing a
    class are redrawn up to ``max_redraws`` times, then skipped.
    """
    rng = Rng(master_seed)
    pooled = {m: [] for m in metrics}
    for k, (scores, labels) in enumerate(runs):
        s = np.asarray(scores, dtype=np.float64)
        y = np.asarray(labels).astype(np.int64)
        _split(s, y)
        gen = rng.stream(f"bootstrap/{k}")
        n = s.size
        for _ in range(resamples):
            for _attempt in range(max_redraws + 1):
                idx = gen.integers(0, n, size=n)
                yy = y[idx]
                if 0 < yy.sum() < n:
                    break
            else:
                warnings.warn(f"run {k}: resample skipped after {max_redraws} redraws", RuntimeWarning)
                continue
            ss = s[idx]
            for m in metrics:
                pooled[m].append(METRIC_FUNCS[m](ss, yy))
    out = {}
    for m in metrics:
        est = np.asarray(pooled[m], dtype=np.float64)
        lo, hi = np.percentile(est, [2.5, 97.5])
        out[m] = MetricSummary(m, float(est.mean()), float(lo), float(hi), est)
    return out


def report_rows(model: str, modality: str, summary: dict[str, MetricSummary]) -> list[dict]:
    return [
        {"model": model, "modality": modality, "metric": s.metric, "mean": s.mean, "ci_low": s.ci_low, "ci_high": s.ci_high}
        for s in summary.values()
    ]


# -- rank agreement ----------------------------------------------------------


def spearman(a, b) -> tuple[float, bool]:
    """Average-rank Spearman rho; a constant input yields (0.0, True)."""
    ra = rankdata(np.asarray(a, dtype=np.float64), method="average")
    rb = rankdata(np.asarray(b, dtype=np.float64), method="average")
    if ra.shape != rb.shape:
        raise MetricError("vectors differ in length")
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        return 0.0, True
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0)), False


def spearman_matrix(vectors: dict) -> tuple[pd.DataFrame, list[tuple[str, str]]]:
    """Symmetric rho matrix over named prediction vectors plus undefined pairs."""
    names = list(vectors)
    mat = np.eye(len(names))
    flagged = []
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            rho, bad = spearman(vectors[names[i]], vectors[names[j]])
            mat[i, j] = mat[j, i] = rho
            if bad:
                flagged.append((names[i], names[j]))
    return pd.DataFrame(mat, index=names, columns=names), flagged
