"""Detection and localization metrics.

All curve metrics sweep thresholds at the observed score values and predict
"anomalous" for ``score >= threshold``. A metric that is undefined for its
input (e.g. AUROC with one class) raises :class:`UndefinedMetric`; reports
carry ``None`` for it and print ``undefined``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

__all__ = [
    "UndefinedMetric",
    "auroc",
    "average_precision",
    "f1_max",
    "pro",
    "MetricsReport",
    "evaluate",
    "config_hash",
    "write_metrics_csv",
    "format_report",
    "METRIC_COLUMNS",
]

METRICS_CSV_VERSION = 1
METRIC_NAMES = ("I-AUROC", "I-AP", "I-F1max", "P-AUROC", "P-AP", "P-F1max", "PRO")
METRIC_COLUMNS = ("format_version", "category", "n_images", "n_anomalous") + METRIC_NAMES + ("config_hash",)
PRO_MAX_THRESHOLDS = 5000
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class UndefinedMetric(ValueError):
    """The metric has no value for this input."""


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0/1")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    s, y = _prepare(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs both classes")
    # doubled Mann-Whitney U is an exact integer
    ranks2 = np.rint(2 * rankdata(s)).astype(np.int64)
    u2 = int(ranks2[y].sum()) - n_pos * (n_pos + 1)
    denom = 2 * n_pos * n_neg
    if 2 * u2 <= denom:
        return u2 / denom
    return 1.0 - (denom - u2) / denom


def _threshold_counts(s, y):
    """Cumulative (tp, fp) at each distinct threshold, highest threshold first."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s_sorted.size - 1]
    return tp[last], fp[last], s_sorted[last]


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("AP needs at least one positive")
    tp, fp, _ = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def f1_max(scores, labels) -> float:
    """Best F1 over all thresholds at observed score values."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("F1-max needs at least one positive")
    tp, fp, _ = _threshold_counts(s, y)
    f1 = 2 * tp / (2 * tp + fp + (n_pos - tp))
    return float(f1.max())


def _pro_thresholds(values: np.ndarray, cap: int) -> np.ndarray:
    distinct = np.unique(values)
    if distinct.size > cap:
        distinct = np.unique(np.quantile(values, np.linspace(0.0, 1.0, cap)))
    return distinct[::-1]


def pro_curve(maps: Sequence, masks: Sequence, max_thresholds: int = PRO_MAX_THRESHOLDS):
    """(fpr, mean component overlap) points from threshold +inf downward."""
    if len(maps) != len(masks):
        raise ValueError(f"{len(maps)} maps but {len(masks)} masks")
    comp_values = []
    neg_values = []
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask) > 0
        if amap.shape != mask.shape:
            raise ValueError(f"map shape {amap.shape} != mask shape {mask.shape}")
        labeled, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
        for k in range(1, n + 1):
            comp_values.append(np.sort(amap[labeled == k]))
        neg_values.append(amap[~mask])
    if not comp_values:
        raise UndefinedMetric("PRO needs at least one anomalous region")
    neg = np.sort(np.concatenate(neg_values))
    if neg.size == 0:
        raise UndefinedMetric("PRO needs at least one normal pixel")
    all_values = np.concatenate([neg] + comp_values)
    thr = _pro_thresholds(all_values, max_thresholds)
    fpr = (neg.size - np.searchsorted(neg, thr, side="left")) / neg.size
    overlap = np.zeros_like(thr)
    for vals in comp_values:
        overlap += (vals.size - np.searchsorted(vals, thr, side="left")) / vals.size
    overlap /= len(comp_values)
    return np.r_[0.0, fpr], np.r_[0.0, overlap]


def _area_to_limit(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    inside = np.flatnonzero(x <= limit)
    i = inside[-1]
    xs, ys = list(x[: i + 1]), list(y[: i + 1])
    if x[i] < limit and i + 1 < x.size:
        x0, x1, y0, y1 = x[i], x[i + 1], y[i], y[i + 1]
        xs.append(limit)
        ys.append(y0 + (y1 - y0) * (limit - x0) / (x1 - x0))
    xs, ys = np.asarray(xs), np.asarray(ys)
    return float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))


def pro(maps: Sequence, masks: Sequence, fpr_limit: float = 0.3,
        max_thresholds: int = PRO_MAX_THRESHOLDS) -> float:
    """Area under the per-region-overlap curve for FPR in [0, fpr_limit], normalized.

    Regions are 8-connected components of the ground-truth masks, pooled
    over all images; FPR is pooled over all normal pixels.
    """
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must lie in (0, 1]")
    fpr, overlap = pro_curve(maps, masks, max_thresholds)
    return _area_to_limit(fpr, overlap, fpr_limit) / fpr_limit


def config_hash(config: dict | None) -> str:
    blob = json.dumps(config or {}, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class MetricsReport:
    category: str = ""
    values: dict = field(default_factory=dict)
    n_images: int = 0
    n_anomalous: int = 0
    n_pixels: int = 0
    config_hash: str = ""
    config: dict = field(default_factory=dict, repr=False)

    def __getitem__(self, name: str) -> Optional[float]:
        return self.values[name]

    def defined(self) -> dict:
        return {k: v for k, v in self.values.items() if v is not None}


def _safe(fn, *args):
    try:
        return float(fn(*args))
    except UndefinedMetric:
        return None


def evaluate(scores, labels, maps=None, masks=None, *, category: str = "",
             config: dict | None = None, fpr_limit: float = 0.3) -> MetricsReport:
    """Image- and pixel-level metrics for one run.

    ``maps``/``masks`` are per-image 2-D arrays; pass ``None`` to skip
    localization (those metrics are then reported undefined).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size != labels.size:
        raise ValueError(f"{scores.size} image scores but {labels.size} labels")
    vals = {
        "I-AUROC": _safe(auroc, scores, labels),
        "I-AP": _safe(average_precision, scores, labels),
        "I-F1max": _safe(f1_max, scores, labels),
    }
    n_pixels = 0
    if maps is not None and masks is not None:
        if not (len(maps) == len(masks) == scores.size):
            raise ValueError(f"counts disagree: {scores.size} scores, {len(maps)} maps, {len(masks)} masks")
        flat_maps = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
        flat_masks = np.concatenate([(np.asarray(m) > 0).ravel() for m in masks]).astype(int)
        if flat_maps.size != flat_masks.size:
            raise ValueError("map and mask pixel counts disagree")
        n_pixels = flat_maps.size
        vals["P-AUROC"] = _safe(auroc, flat_maps, flat_masks)
        vals["P-AP"] = _safe(average_precision, flat_maps, flat_masks)
        vals["P-F1max"] = _safe(f1_max, flat_maps, flat_masks)
        vals["PRO"] = _safe(pro, maps, masks, fpr_limit)
    else:
        vals.update({k: None for k in ("P-AUROC", "P-AP", "P-F1max", "PRO")})
    return MetricsReport(category=category, values=vals, n_images=int(scores.size),
                         n_anomalous=int(np.sum(labels == 1)), n_pixels=n_pixels,
                         config_hash=config_hash(config), config=config or {})


def _fmt(v: Optional[float]) -> str:
    return "undefined" if v is None else f"{v:.6f}"


def write_metrics_csv(reports: Iterable[MetricsReport], path: str | Path) -> None:
    """One row per category plus an ``average`` row over defined values."""
    reports = list(reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in reports:
            w.writerow([METRICS_CSV_VERSION, r.category, r.n_images, r.n_anomalous]
                       + [_fmt(r.values.get(k)) for k in METRIC_NAMES] + [r.config_hash])
        if len(reports) > 1:
            avg = []
            for k in METRIC_NAMES:
                defined = [r.values[k] for r in reports if r.values.get(k) is not None]
                avg.append(_fmt(float(np.mean(defined)) if defined else None))
            hashes = {r.config_hash for r in reports}
            w.writerow([METRICS_CSV_VERSION, "average", sum(r.n_images for r in reports),
                        sum(r.n_anomalous for r in reports)] + avg
                       + [hashes.pop() if len(hashes) == 1 else "mixed"])


def format_report(report: MetricsReport) -> str:
    lines = [f"category: {report.category or '-'}",
             f"images: {report.n_images} ({report.n_anomalous} anomalous), pixels: {report.n_pixels}",
             f"config hash: {report.config_hash}"]
    det = "/".join(_fmt(report.values.get(k)) for k in METRIC_NAMES[:3])
    loc = "/".join(_fmt(report.values.get(k)) for k in METRIC_NAMES[3:])
    lines.append(f"I-AUROC/I-AP/I-F1max: {det}")
    lines.append(f"P-AUROC/P-AP/P-F1max/PRO: {loc}")
    return "\n".join(lines) + "\n"
