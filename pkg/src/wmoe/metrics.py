"""Image- and pixel-level detection metrics.

Undefined metrics (a class missing from the labels) are reported as ``None``
rather than a number.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _prep(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    return s, y


def auroc(scores, labels) -> float | None:
    """Mann-Whitney AUROC with half credit for ties."""
    s, y = _prep(scores, labels)
    P, N = int(y.sum()), int((~y).sum())
    if P == 0 or N == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - P * (P + 1) / 2.0
    return float(u / (P * N))


def _sweep(s: np.ndarray, y: np.ndarray):
    """Cumulative (tp, fp) at each distinct threshold, highest score first."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    return tp[last].astype(np.float64), fp[last].astype(np.float64)


def average_precision(scores, labels) -> float | None:
    """Sum of precision times recall increment over distinct thresholds."""
    s, y = _prep(scores, labels)
    P = int(y.sum())
    if P == 0:
        return None
    tp, fp = _sweep(s, y)
    precision = tp / (tp + fp)
    recall = tp / P
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def f1_max(scores, labels) -> float | None:
    """Best F1 over thresholds at every distinct score (positive when score >= threshold)."""
    s, y = _prep(scores, labels)
    P = int(y.sum())
    if P == 0:
        return None
    tp, fp = _sweep(s, y)
    precision = tp / (tp + fp)
    recall = tp / P
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(tp > 0, 2 * precision * recall / (precision + recall), 0.0)
    return float(f1.max())


def label_regions(mask: np.ndarray) -> tuple[np.ndarray, int]:
    lab, n = ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)
    return lab, int(n)


def trapezoid_to(x: np.ndarray, y: np.ndarray, x_max: float) -> float:
    """Trapezoid area under (x, y) (x non-decreasing) from x[0] up to ``x_max``.

    The curve is linearly interpolated at ``x_max`` when it crosses it.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = x <= x_max
    area = float(np.sum(np.diff(x[keep]) * (y[keep][1:] + y[keep][:-1]) / 2.0))
    if not keep.all():
        i = int(np.argmin(keep))  # first point beyond x_max
        if i > 0:
            x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
            y_at = y0 + (y1 - y0) * (x_max - x0) / (x1 - x0)
            area += (x_max - x0) * (y0 + y_at) / 2.0
    return area


def pro(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], fpr_limit: float = 0.3,
        max_thresholds: int | None = 256) -> float | None:
    """Per-region overlap integrated over FPR in [0, fpr_limit], normalised by fpr_limit.

    Thresholds are all distinct map values (exact sweep) or, when there are more
    than ``max_thresholds`` of them, that many evenly spaced quantiles. The curve
    starts at (FPR, PRO) = (0, 0).
    """
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    masks = [np.asarray(m) > 0 for m in masks]
    region_ids = []
    n_regions = 0
    for m in masks:
        lab, n = label_regions(m)
        region_ids.append(np.where(lab > 0, lab + n_regions, 0))
        n_regions += n
    if n_regions == 0:
        return None
    vals = np.concatenate([m.reshape(-1) for m in maps])
    rid = np.concatenate([r.reshape(-1) for r in region_ids])
    neg = rid == 0
    n_neg = int(neg.sum())
    if n_neg == 0:
        return None
    region_size = np.bincount(rid, minlength=n_regions + 1)[1:].astype(np.float64)

    uniq = np.unique(vals)
    if max_thresholds is not None and len(uniq) > max_thresholds:
        thresholds = np.unique(np.quantile(vals, np.linspace(0.0, 1.0, max_thresholds)))
    else:
        thresholds = uniq
    thresholds = thresholds[::-1]

    # bucket each pixel by the first (largest) threshold it clears, then accumulate
    T = len(thresholds)
    pos_in = np.searchsorted(-thresholds, -vals, side="left")
    valid = pos_in < T
    fp_hist = np.bincount(pos_in[valid & neg], minlength=T)
    fpr = np.cumsum(fp_hist) / n_neg
    reg_hits = np.zeros((T, n_regions))
    sel = valid & ~neg
    np.add.at(reg_hits, (pos_in[sel], rid[sel] - 1), 1.0)
    pro_curve = (np.cumsum(reg_hits, axis=0) / region_size).mean(axis=1)

    x = np.r_[0.0, fpr]
    yv = np.r_[0.0, pro_curve]
    return float(trapezoid_to(x, yv, fpr_limit) / fpr_limit)


@dataclass
class MetricsReport:
    """Field order follows the reporting convention: image (AUROC, F1-max, AP), pixel (AUROC, PRO, AP)."""

    image_auroc: float | None
    image_f1max: float | None
    image_ap: float | None
    pixel_auroc: float | None
    pixel_pro: float | None
    pixel_ap: float | None
    n_images_pos: int = 0
    n_images_neg: int = 0
    n_pixels_pos: int = 0
    n_pixels_neg: int = 0
    pixels_subsampled: bool = False

    METRICS = ("image_auroc", "image_f1max", "image_ap", "pixel_auroc", "pixel_pro", "pixel_ap")

    def as_row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def compute_report(image_scores, image_labels, maps, masks, fpr_limit: float = 0.3,
                   max_pixels: int = 1_000_000, seed: int = 0) -> MetricsReport:
    image_scores = np.asarray(image_scores, dtype=np.float64)
    image_labels = np.asarray(image_labels).astype(int)
    maps = np.asarray(maps, dtype=np.float64)
    masks = (np.asarray(masks) > 0)
    flat_s = maps.reshape(-1)
    flat_y = masks.reshape(-1)
    subsampled = False
    if flat_s.size > max_pixels:
        idx = np.sort(np.random.default_rng(seed).choice(flat_s.size, max_pixels, replace=False))
        flat_s, flat_y = flat_s[idx], flat_y[idx]
        subsampled = True
    return MetricsReport(
        image_auroc=auroc(image_scores, image_labels),
        image_f1max=f1_max(image_scores, image_labels),
        image_ap=average_precision(image_scores, image_labels),
        pixel_auroc=auroc(flat_s, flat_y),
        pixel_pro=pro(list(maps), list(masks), fpr_limit),
        pixel_ap=average_precision(flat_s, flat_y),
        n_images_pos=int(image_labels.sum()),
        n_images_neg=int((image_labels == 0).sum()),
        n_pixels_pos=int(flat_y.sum()),
        n_pixels_neg=int((~flat_y).sum()),
        pixels_subsampled=subsampled,
    )


def evaluate(model, samples, features=None, fpr_limit: float = 0.3) -> tuple[MetricsReport, np.ndarray, np.ndarray]:
    """Score ``samples`` with ``model``: returns the report, image scores and fused maps."""
    if not samples:
        raise ValueError("evaluation set is empty")
    if features is None:
        features = model.encode(np.stack([s.pixels for s in samples]))
    scores, maps = model.predict(*features)
    report = compute_report(scores, [s.label for s in samples], maps,
                            np.stack([s.mask for s in samples]), fpr_limit)
    return report, scores, maps


def write_metrics_csv(rows: Sequence[tuple[str, str, MetricsReport]], path) -> None:
    """One row per (split, family)."""
    names = [f.name for f in fields(MetricsReport)]
    with open(Path(path), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["split", "family"] + names)
        for split, family, rep in rows:
            row = rep.as_row()
            wr.writerow([split, family] + ["" if row[n] is None else row[n] for n in names])
