"""Ranking metrics for image-level detection and token-level localization.

All threshold sweeps group tied scores, so results never depend on the
order in which samples were supplied.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import label as _label
from scipy.stats import rankdata

from .exceptions import MetricUndefinedError

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _prep(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with half credit for ties."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUROC needs both positive and negative samples")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def threshold_counts(scores, labels):
    """Cumulative TP/FP counts at each distinct score, highest threshold first."""
    s, y = _prep(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp.astype(np.float64), fp.astype(np.float64)


def roc_curve(scores, labels):
    thr, tp, fp = threshold_counts(scores, labels)
    n_pos, n_neg = tp[-1], fp[-1]
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("ROC needs both classes")
    return np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos], np.r_[np.inf, thr]


def precision_recall_curve(scores, labels):
    thr, tp, fp = threshold_counts(scores, labels)
    if tp[-1] == 0:
        raise MetricUndefinedError("precision/recall undefined without positives")
    return tp / (tp + fp), tp / tp[-1], thr


def average_precision(scores, labels) -> float:
    """Sum of ``(R_k - R_{k-1}) * P_k`` over descending distinct thresholds."""
    precision, recall, _ = precision_recall_curve(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def f1_max(scores, labels) -> float:
    precision, recall, _ = precision_recall_curve(scores, labels)
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return float(f1.max())


def pro_curve(maps, masks):
    """Per-region-overlap vs false-positive-rate over every distinct map value.

    Regions are 8-connected components of each mask. Returns ``(fpr, pro)``
    starting at ``(0, 0)`` for a threshold above every score.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    masks = [np.asarray(m).astype(bool) for m in masks]
    region_ids = []
    n_regions = 0
    for m in masks:
        lab, k = _label(m, structure=_EIGHT_CONNECTED)
        region_ids.append(np.where(lab > 0, lab + n_regions, 0))
        n_regions += k
    if n_regions == 0:
        raise MetricUndefinedError("AUPRO needs at least one anomalous region")
    s = np.concatenate([m.reshape(-1) for m in maps])
    rid = np.concatenate([r.reshape(-1) for r in region_ids])
    normal = rid == 0
    n_normal = int(normal.sum())
    if n_normal == 0:
        raise MetricUndefinedError("AUPRO needs normal tokens to measure FPR")
    region_size = np.bincount(rid, minlength=n_regions + 1).astype(np.float64)
    # each anomalous token adds 1/(size * n_regions) to PRO once exceeded
    weight = np.where(normal, 0.0, 1.0 / (region_size[rid] * n_regions))
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    pro = np.cumsum(weight[order])[last]
    # summed reciprocals drift by an ulp; pin full coverage to exactly 1
    covered = np.cumsum(~normal[order])[last] == rid.size - n_normal
    pro = np.where(covered, 1.0, np.minimum(pro, 1.0))
    fpr = np.cumsum(normal[order])[last] / n_normal
    return np.r_[0.0, fpr], np.r_[0.0, pro]


def _integrate_to(x, y, limit):
    """Trapezoid area under ``y(x)`` on ``[0, limit]`` (x nondecreasing)."""
    area = 0.0
    for i in range(1, x.size):
        x0, x1 = x[i - 1], x[i]
        if x0 >= limit:
            break
        y0, y1 = y[i - 1], y[i]
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += 0.5 * (x1 - x0) * (y0 + y1)
    return area


def aupro(maps, masks, fpr_limit: float = 0.3) -> float:
    """Normalized area under the PRO curve up to ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must lie in (0, 1]")
    fpr, pro = pro_curve(maps, masks)
    return float(_integrate_to(fpr, pro, fpr_limit) / fpr_limit)
