"""AUC and peak-distance metrics for predicted heatmaps."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidArgument
from .heatmap import GridSize, argmax_point, argmax_points, render_gaussian

REPORT_COLUMNS = ("method", "fraction", "seed", "t_init", "steps", "avg_dist", "min_dist", "auc")


def jitter_annotations(points: np.ndarray, n_annotations: int, sigma_px: float, size: GridSize,
                       rng: np.random.Generator) -> np.ndarray:
    """Emulate annotator disagreement: ``(N, n_annotations, 2)`` points around each gt point.

    With ``n_annotations == 1`` the gt point itself is the single annotation.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if n_annotations < 1:
        raise InvalidArgument("need at least one annotation per sample")
    if n_annotations == 1:
        return points[:, None, :].copy()
    scale = np.array([sigma_px / (size.width - 1), sigma_px / (size.height - 1)])
    noise = rng.standard_normal((len(points), n_annotations, 2)) * scale
    return np.clip(points[:, None, :] + noise, 0.0, 1.0)


def dist_metrics(pred: np.ndarray, anns) -> tuple[float, float]:
    """(mean, min) normalized distance from the prediction peak to the annotations."""
    anns = np.asarray(anns, dtype=np.float64).reshape(-1, 2)
    if len(anns) == 0:
        raise InvalidArgument("annotation set is empty")
    p = np.array(argmax_point(pred))
    d = np.linalg.norm(anns - p, axis=1)
    return float(d.mean()), float(d.min())


def annotation_mask(anns, size: GridSize, mode: str = "multi", threshold: float = 0.5,
                    sigma: float = 3.0) -> np.ndarray:
    """Binary ground-truth map for AUC.

    ``multi`` marks the pixel of every annotation; ``gaussian`` thresholds a
    Gaussian rendered at the first annotation at ``threshold`` of its peak.
    """
    anns = np.asarray(anns, dtype=np.float64).reshape(-1, 2)
    if mode == "multi":
        m = np.zeros(size.shape, dtype=bool)
        rows = np.clip(np.floor(anns[:, 1] * (size.height - 1) + 0.5).astype(int), 0, size.height - 1)
        cols = np.clip(np.floor(anns[:, 0] * (size.width - 1) + 0.5).astype(int), 0, size.width - 1)
        m[rows, cols] = True
        return m
    if mode == "gaussian":
        return render_gaussian(anns[0], sigma, size) >= threshold
    raise InvalidArgument(f"unknown AUC mode {mode!r}")


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic ROC AUC with midranks for ties; NaN when a class is empty."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores)  # average ranks for ties
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc(pred: np.ndarray, anns, mode: str = "multi", threshold: float = 0.5, sigma: float = 3.0) -> float:
    pred = np.asarray(pred)
    return roc_auc(pred, annotation_mask(anns, GridSize(*pred.shape), mode, threshold, sigma))


@dataclass
class MetricsReport:
    ids: np.ndarray
    avg_dist: np.ndarray
    min_dist: np.ndarray
    auc: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def mean_avg_dist(self) -> float:
        return float(np.mean(self.avg_dist))

    @property
    def mean_min_dist(self) -> float:
        return float(np.mean(self.min_dist))

    @property
    def mean_auc(self) -> float:
        return float(np.nanmean(self.auc)) if np.any(~np.isnan(self.auc)) else math.nan

    def row(self) -> dict:
        row = {k: self.meta.get(k, "") for k in REPORT_COLUMNS[:5]}
        row.update(avg_dist=self.mean_avg_dist, min_dist=self.mean_min_dist, auc=self.mean_auc)
        return row

    def per_sample(self) -> list[dict]:
        return [{"id": int(i), "avg_dist": float(a), "min_dist": float(m),
                 "auc": None if math.isnan(u) else float(u)}
                for i, a, m, u in zip(self.ids, self.avg_dist, self.min_dist, self.auc)]


def evaluate(preds: np.ndarray, annotations: np.ndarray, *, mode: str = "multi", threshold: float = 0.5,
             sigma: float = 3.0, ids=None, meta: dict | None = None) -> MetricsReport:
    """Score a stack of predicted heatmaps ``(N, H, W)`` against ``(N, A, 2)`` annotations."""
    preds = np.asarray(preds)
    annotations = np.asarray(annotations, dtype=np.float64)
    if preds.ndim != 3 or len(preds) != len(annotations):
        raise InvalidArgument(f"prediction/annotation mismatch: {preds.shape} vs {annotations.shape}")
    size = GridSize(*preds.shape[1:])
    peaks = argmax_points(preds)
    d = np.linalg.norm(annotations - peaks[:, None, :], axis=2)
    aucs = np.array([roc_auc(p, annotation_mask(a, size, mode, threshold, sigma))
                     for p, a in zip(preds, annotations)])
    ids = np.arange(len(preds)) if ids is None else np.asarray(ids)
    return MetricsReport(ids, d.mean(axis=1), d.min(axis=1), aucs, dict(meta or {}))


def write_report_table(path: str | Path, reports: list[MetricsReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        for r in reports:
            row = r.row()
            for k in ("avg_dist", "min_dist", "auc"):
                row[k] = f"{row[k]:.6f}"
            w.writerow(row)


def write_per_sample(path: str | Path, report: MetricsReport) -> None:
    with open(path, "w") as f:
        json.dump({"meta": report.meta, "samples": report.per_sample()}, f, sort_keys=True)
        f.write("\n")


def read_report_table(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f, delimiter="\t"))
