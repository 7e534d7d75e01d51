"""Slow reference implementations used to cross-check the metrics and the KL term.

Each function recomputes its quantity from definitions with explicit loops and
shares no code with :mod:`wmoe.metrics`.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def auroc_pairs(scores, labels) -> float:
    s = [float(v) for v in scores]
    y = [bool(v) for v in labels]
    pos = [a for a, l in zip(s, y) if l]
    neg = [a for a, l in zip(s, y) if not l]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def _counts_at(s, y, t):
    tp = sum(1 for a, l in zip(s, y) if l and a >= t)
    fp = sum(1 for a, l in zip(s, y) if not l and a >= t)
    return tp, fp


def ap_thresholds(scores, labels) -> float:
    s = [float(v) for v in scores]
    y = [bool(v) for v in labels]
    P = sum(y)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(s), reverse=True):
        tp, fp = _counts_at(s, y, t)
        recall = tp / P
        if recall > prev_recall:
            ap += (recall - prev_recall) * tp / (tp + fp)
            prev_recall = recall
    return ap


def f1_thresholds(scores, labels) -> float:
    s = [float(v) for v in scores]
    y = [bool(v) for v in labels]
    P = sum(y)
    best = 0.0
    for t in set(s):
        tp, fp = _counts_at(s, y, t)
        if tp == 0:
            continue
        prec, rec = tp / (tp + fp), tp / P
        best = max(best, 2 * prec * rec / (prec + rec))
    return best


def pro_exact(maps, masks, fpr_limit: float = 0.3) -> float:
    """Enumerate every distinct map value, count overlaps region by region."""
    regions = []
    negatives = []
    for m, g in zip(maps, masks):
        lab, n = ndimage.label(np.asarray(g) > 0, structure=np.ones((3, 3)))
        for r in range(1, n + 1):
            regions.append((np.asarray(m), lab == r))
        negatives.append((np.asarray(m), np.asarray(g) == 0))
    n_neg = sum(int(neg.sum()) for _, neg in negatives)
    values = sorted({float(v) for m in maps for v in np.asarray(m).reshape(-1)}, reverse=True)
    pts = [(0.0, 0.0)]
    for t in values:
        fp = sum(int(((m >= t) & neg).sum()) for m, neg in negatives)
        overlaps = [((m >= t) & reg).sum() / reg.sum() for m, reg in regions]
        pts.append((fp / n_neg, float(np.mean(overlaps))))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 >= fpr_limit:
            break
        if x1 > fpr_limit:
            y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
            x1 = fpr_limit
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area / fpr_limit


def kl_monte_carlo(mu, log_var, n: int, rng: np.random.Generator, chunk: int = 200_000) -> float:
    """E_q[log q(z) - log p(z)] for q = N(mu, diag exp(log_var)), p = N(0, I)."""
    mu = np.asarray(mu, dtype=np.float64)
    sd = np.exp(0.5 * np.asarray(log_var, dtype=np.float64))
    total = 0.0
    done = 0
    while done < n:
        b = min(chunk, n - done)
        eps = rng.standard_normal((b, mu.size))
        z = mu + sd * eps
        log_q = -0.5 * (eps ** 2).sum(axis=1) - np.log(sd).sum()
        log_p = -0.5 * (z ** 2).sum(axis=1)
        total += float((log_q - log_p).sum())
        done += b
    return total / n
