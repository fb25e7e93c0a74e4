"""Slow, obviously-correct reference implementations used only by the tests."""

from __future__ import annotations

import math

import numpy as np


def sampen_brute(x, m: int = 2, r: float | None = None) -> float:
    """Sample entropy by explicit loops over ordered pairs i != j of the first N-m templates."""
    x = [float(v) for v in x]
    n = len(x)
    if r is None:
        mu = sum(x) / n
        r = 0.2 * math.sqrt(sum((v - mu) ** 2 for v in x) / n)
    nt = n - m
    b = a = 0
    for i in range(nt):
        for j in range(nt):
            if j != i and max(abs(x[i + k] - x[j + k]) for k in range(m)) <= r:
                b += 1
                if abs(x[i + m] - x[j + m]) <= r:
                    a += 1
    if a > 0:
        return math.log(b / a)
    if b > 0:
        return math.log(b + 1.0)
    return math.log((n - m - 1) * (n - m))


def katz_brute(y) -> float:
    """Katz dimension of the curve (k, y[k]) from explicit point distances."""
    pts = [(float(k), float(v)) for k, v in enumerate(y)]
    n = len(pts) - 1
    if n < 2:
        return 1.0
    path = sum(math.dist(pts[k], pts[k + 1]) for k in range(n))
    far = max(math.dist(pts[0], p) for p in pts[1:])
    if far <= 0 or path <= 0:
        return 1.0
    den = math.log10(n) + math.log10(far) - math.log10(path)
    if den <= 1e-9:
        return 1.0
    return math.log10(n) / den


def ventilation_brute(x) -> float:
    return sum(max(0.0, float(x[k + 1]) - float(x[k])) for k in range(len(x) - 1))


def roc_auc_pairs(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly; ties count half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def prc_auc_thresholds(scores, labels) -> float:
    """Sum over distinct thresholds (descending) of recall gain times precision."""
    n_pos = sum(1 for y in labels if y)
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(1 for y in sel if y)
        recall = tp / n_pos
        area += (recall - prev_recall) * (tp / len(sel))
        prev_recall = recall
    return area


def match_events_grid(truth, pred, span_s: int, res: int = 2):
    """TP/FP/FN/TN on a fine grid; events must sit on the 1/res-second lattice."""
    n = span_s * res

    def cover(events):
        m = np.zeros(n, dtype=bool)
        for e in events:
            m[int(round(e.start_s * res)) : int(round(e.end_s * res))] = True
        return m

    tc, pc = cover(truth), cover(pred)

    def cells(e):
        return slice(int(round(e.start_s * res)), int(round(e.end_s * res)))

    tp = sum(1 for e in truth if pc[cells(e)].sum() >= 0.5 * e.duration_s * res)
    fn = len(truth) - tp
    fp = sum(1 for e in pred if tc[cells(e)].sum() < 0.5 * e.duration_s * res)
    tn = (~(tc | pc)).sum() / res / 18.0
    return tp, fp, fn, tn
