"""Anomaly maps, image scores and the full metrics report."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import Tensor, no_grad
from .exceptions import DimensionError, MetricUndefinedError
from .metrics import (aupro, auroc, average_precision, f1_max, precision_recall_curve, pro_curve,
                      roc_curve)
from .model import ModelConfig, model_forward
from .synthetic import TokenBatch

TABLE_COLUMNS = ("i_auc", "i_ap", "i_f1", "p_auc", "p_ap", "p_f1", "aupro")


@dataclass
class AnomalyResult:
    map: np.ndarray
    image_score: float


def anomaly_map(recon, target, grid, smooth_sigma: float = 0.0) -> list[AnomalyResult]:
    """Per-token ``1 - cos`` reshaped row-major onto the grid; score is the max."""
    r = np.asarray(recon.data if isinstance(recon, Tensor) else recon, dtype=np.float64)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if r.shape != t.shape:
        raise DimensionError(f"recon {r.shape} and target {t.shape} differ")
    h, w = grid
    if r.shape[1] != h * w:
        raise DimensionError(f"{r.shape[1]} tokens do not fill grid {grid}")
    nr = np.linalg.norm(r, axis=-1)
    nt = np.linalg.norm(t, axis=-1)
    ok = (nr >= 1e-12) & (nt >= 1e-12)
    cs = np.where(ok, (r * t).sum(-1) / np.where(ok, nr * nt, 1.0), 0.0)
    dist = 1.0 - np.clip(cs, -1.0, 1.0)
    results = []
    for m in dist.reshape(-1, h, w):
        if smooth_sigma > 0:
            m = gaussian_filter(m, smooth_sigma, mode="nearest")
        results.append(AnomalyResult(m, float(m.max())))
    return results


@dataclass
class MetricsReport:
    i_auroc: float
    i_ap: float
    i_f1max: float
    p_auroc: float
    p_ap: float
    p_f1max: float
    aupro: float
    curves: dict = field(default_factory=dict, repr=False)

    def row(self) -> list[float]:
        return [self.i_auroc, self.i_ap, self.i_f1max, self.p_auroc, self.p_ap, self.p_f1max,
                self.aupro]

    def scalars(self) -> dict:
        return dict(zip(TABLE_COLUMNS, self.row()))

    def to_json(self) -> dict:
        return {"metrics": self.scalars(),
                "curves": {k: [np.asarray(a).tolist() for a in v] for k, v in self.curves.items()}}

    def write(self, json_path, csv_path=None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(TABLE_COLUMNS)
                w.writerow([repr(v) for v in self.row()])


def metrics_from_maps(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                      fpr_limit: float = 0.3, with_curves: bool = True) -> MetricsReport:
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    masks = [np.asarray(m).astype(bool) for m in masks]
    img_scores = np.array([m.max() for m in maps])
    img_labels = np.array([m.any() for m in masks])
    pix_scores = np.concatenate([m.reshape(-1) for m in maps])
    pix_labels = np.concatenate([m.reshape(-1) for m in masks])
    try:
        report = MetricsReport(
            auroc(img_scores, img_labels), average_precision(img_scores, img_labels),
            f1_max(img_scores, img_labels), auroc(pix_scores, pix_labels),
            average_precision(pix_scores, pix_labels), f1_max(pix_scores, pix_labels),
            aupro(maps, masks, fpr_limit))
    except MetricUndefinedError as exc:
        raise MetricUndefinedError(f"evaluation set unusable: {exc}") from exc
    if with_curves:
        report.curves = {
            "image_roc": roc_curve(img_scores, img_labels)[:2],
            "image_pr": precision_recall_curve(img_scores, img_labels)[:2],
            "pixel_roc": roc_curve(pix_scores, pix_labels)[:2],
            "pixel_pr": precision_recall_curve(pix_scores, pix_labels)[:2],
            "pro": pro_curve(maps, masks),
        }
    return report


def predict_maps(params: Mapping[str, Tensor], cfg: ModelConfig, data: TokenBatch,
                 chunk: int = 64, smooth_sigma: float = 0.0) -> list[AnomalyResult]:
    """Inference-mode anomaly maps for every sample, in dataset order."""
    results = []
    for start in range(0, len(data), chunk):
        layers = [l[start:start + chunk] for l in data.layers]
        with no_grad():
            out = model_forward(params, layers, data.grid, cfg, training=False)
        results.extend(anomaly_map(out["reconstructed"], out["target"], data.grid, smooth_sigma))
    return results


def evaluate(params: Mapping[str, Tensor], cfg: ModelConfig, test_set: TokenBatch,
             fpr_limit: float = 0.3, smooth_sigma: float = 0.0,
             oracle: bool = False) -> tuple[MetricsReport, list[AnomalyResult]]:
    """Score ``test_set`` in inference mode.

    With ``oracle=True`` the model is bypassed and each map is its mask,
    a self-test that must yield perfect metrics.
    """
    if oracle:
        results = [AnomalyResult(m.astype(np.float64), float(m.max())) for m in test_set.anomaly_mask]
    else:
        results = predict_maps(params, cfg, test_set, smooth_sigma=smooth_sigma)
    report = metrics_from_maps([r.map for r in results], list(test_set.anomaly_mask), fpr_limit)
    return report, results


def per_class_rows(results: Sequence[AnomalyResult], test_set: TokenBatch,
                   fpr_limit: float = 0.3) -> list[tuple[int, Optional[MetricsReport]]]:
    rows = []
    for c in np.unique(test_set.class_ids):
        idx = np.flatnonzero(test_set.class_ids == c)
        try:
            rep = metrics_from_maps([results[i].map for i in idx],
                                    [test_set.anomaly_mask[i] for i in idx], fpr_limit,
                                    with_curves=False)
        except MetricUndefinedError:
            rep = None
        rows.append((int(c), rep))
    return rows
