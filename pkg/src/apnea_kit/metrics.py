"""Evaluation math: event matching, rank metrics, AHI and its categories."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateVariance, NoPositives, SingleClass, TooFew, ZeroSleep, MissingSignal
from .recording import EventAnnotation, EventKind, Hypnogram, SignalTrace, Stage

logger = logging.getLogger(__name__)

TN_EVENT_SECONDS = 18.0
OVERLAP_FRACTION = 0.5


# -- interval helpers ---------------------------------------------------------


def merge_intervals(intervals: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for s, e in sorted(intervals):
        if e <= s:
            continue
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(s, e) for s, e in out]


def overlap_with_union(s: float, e: float, union: Sequence[tuple[float, float]]) -> float:
    total = 0.0
    for a, b in union:
        if b <= s:
            continue
        if a >= e:
            break
        total += min(e, b) - max(s, a)
    return total


def covered_length(union: Sequence[tuple[float, float]], lo: float, hi: float) -> float:
    return sum(max(0.0, min(b, hi) - max(a, lo)) for a, b in union)


# -- event matching -----------------------------------------------------------


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: float = 0.0
    tp_by_kind: dict = field(default_factory=dict)
    fn_by_kind: dict = field(default_factory=dict)

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        kinds = set(self.tp_by_kind) | set(other.tp_by_kind) | set(self.fn_by_kind) | set(other.fn_by_kind)
        return MatchCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tn + other.tn,
            {k: self.tp_by_kind.get(k, 0) + other.tp_by_kind.get(k, 0) for k in kinds},
            {k: self.fn_by_kind.get(k, 0) + other.fn_by_kind.get(k, 0) for k in kinds},
        )

    def sensitivity_by_kind(self) -> dict:
        out = {}
        for k in sorted(set(self.tp_by_kind) | set(self.fn_by_kind)):
            n = self.tp_by_kind.get(k, 0) + self.fn_by_kind.get(k, 0)
            out[k] = self.tp_by_kind.get(k, 0) / n if n else None
        return out


def match_events(truth: Sequence[EventAnnotation], pred: Sequence[EventAnnotation], span_s: float) -> MatchCounts:
    """Event-level TP/FP/FN with the two-sided 50 % overlap rule.

    Overlaps are measured against the union of the other side's events, so
    several short predictions can jointly cover one truth event. True
    negatives are the seconds covered by neither side divided by 18.
    """
    t_union = merge_intervals((e.start_s, e.end_s) for e in truth)
    p_union = merge_intervals((e.start_s, e.end_s) for e in pred)
    c = MatchCounts()
    for e in truth:
        kind = e.kind.value
        if overlap_with_union(e.start_s, e.end_s, p_union) >= OVERLAP_FRACTION * e.duration_s:
            c.tp += 1
            c.tp_by_kind[kind] = c.tp_by_kind.get(kind, 0) + 1
        else:
            c.fn += 1
            c.fn_by_kind[kind] = c.fn_by_kind.get(kind, 0) + 1
    for e in pred:
        if overlap_with_union(e.start_s, e.end_s, t_union) < OVERLAP_FRACTION * e.duration_s:
            c.fp += 1
    both = merge_intervals(t_union + p_union)
    c.tn = max(0.0, span_s - covered_length(both, 0.0, span_s)) / TN_EVENT_SECONDS
    return c


def _ratio(num: float, den: float) -> float | None:
    return num / den if den > 0 else None


def binary_metrics(c: MatchCounts) -> dict:
    """Accuracy, sensitivity, precision, F1 and FPR; undefined ones are ``None``."""
    sens = _ratio(c.tp, c.tp + c.fn)
    prec = _ratio(c.tp, c.tp + c.fp)
    f1 = None
    if sens is not None and prec is not None and sens + prec > 0:
        f1 = 2 * sens * prec / (sens + prec)
    return {
        "accuracy": _ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn),
        "sensitivity": sens,
        "precision": prec,
        "f1": f1,
        "fpr": _ratio(c.fp, c.fp + c.tn),
    }


# -- rank metrics -------------------------------------------------------------


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score+ > score-) + 0.5 P(tie), from average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC AUC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def prc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-integrated precision-recall area; tied scores form one threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("PRC AUC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    tp = np.cumsum(y[order])
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s.size - 1]
    tp_at = tp[last].astype(np.float64)
    n_at = (last + 1).astype(np.float64)
    recall = tp_at / n_pos
    precision = tp_at / n_at
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def f1_at(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    pred = np.asarray(scores) >= threshold
    y = np.asarray(labels).astype(bool)
    tp = float(np.sum(pred & y))
    denom = 2 * tp + np.sum(pred & ~y) + np.sum(~pred & y)
    return 2 * tp / denom if denom else 0.0


# -- AHI ----------------------------------------------------------------------


class AhiCategory(str, enum.Enum):
    NORMAL = "Normal"
    MILD = "Mild"
    MODERATE = "Moderate"
    SEVERE = "Severe"


CATEGORIES = tuple(AhiCategory)
CATEGORY_BOUNDS = (5.0, 15.0, 30.0)


def categorize_ahi(ahi: float) -> AhiCategory:
    """Left-inclusive bands [0,5), [5,15), [15,30), [30,inf)."""
    if ahi < 0:
        raise ValueError("AHI must be >= 0")
    return CATEGORIES[int(np.searchsorted(CATEGORY_BOUNDS, ahi, side="right"))]


def in_wake(event: EventAnnotation, hypnogram: Hypnogram, strict: bool = False) -> bool:
    """True if the event lies in Wake: more than half its duration, or any overlap when ``strict``."""
    wake = hypnogram.stage_seconds(event.start_s, event.end_s, Stage.WAKE)
    return wake > 0 if strict else wake > OVERLAP_FRACTION * event.duration_s


def compute_ahi(events: Sequence[EventAnnotation], hypnogram: Hypnogram, exclude_wake: bool = True) -> float:
    hours = hypnogram.sleep_hours
    if hours <= 0:
        raise ZeroSleep("no sleep epochs in hypnogram")
    n = sum(1 for e in events if not (exclude_wake and in_wake(e, hypnogram)))
    return n / hours


def pearson_r(a: Sequence[float], b: Sequence[float]) -> float:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.size < 2:
        raise TooFew("correlation needs at least two values")
    dx = x - x.mean()
    dy = y - y.mean()
    den = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if den == 0:
        raise DegenerateVariance("correlation undefined for constant input")
    return float(dx @ dy) / den


@dataclass
class AhiReport:
    ahi_true: list
    ahi_pred: list
    r: float
    r2: float
    confusion: list  # 4x4 counts, rows = truth category
    accuracy: float
    diff_bins: list  # bin left edges, width 2, centered on 0
    diff_counts: list
    diff_mean_ci: dict

    def to_json(self) -> dict:
        return {
            "ahi_true": self.ahi_true,
            "ahi_pred": self.ahi_pred,
            "r": self.r,
            "r2": self.r2,
            "categories": [c.value for c in CATEGORIES],
            "confusion": self.confusion,
            "confusion_row_pct": [
                [100.0 * v / sum(row) if sum(row) else 0.0 for v in row] for row in self.confusion
            ],
            "category_accuracy": self.accuracy,
            "diff_histogram": {"bin_left_edges": self.diff_bins, "counts": self.diff_counts, "bin_width": 2.0},
            "diff_mean_ci": self.diff_mean_ci,
        }


def ahi_report(pairs: Sequence[tuple[float, float]]) -> AhiReport:
    """Agreement between true and predicted AHI over recordings."""
    if len(pairs) < 2:
        raise TooFew("AHI report needs at least two recordings")
    truth = np.array([p[0] for p in pairs], dtype=np.float64)
    pred = np.array([p[1] for p in pairs], dtype=np.float64)
    r = pearson_r(truth, pred)
    conf = np.zeros((4, 4), dtype=int)
    for a, b in zip(truth, pred):
        conf[CATEGORIES.index(categorize_ahi(a)), CATEGORIES.index(categorize_ahi(b))] += 1
    diff = pred - truth
    # bins of width 2 with one bin centered on 0: edges at odd numbers
    lo = 2 * math.floor((diff.min() + 1) / 2) - 1
    hi = 2 * math.ceil((diff.max() + 1) / 2) - 1
    if hi <= lo:
        hi = lo + 2
    edges = np.arange(lo, hi + 2, 2.0)
    counts, _ = np.histogram(diff, bins=edges)
    return AhiReport(
        truth.tolist(),
        pred.tolist(),
        r,
        r * r,
        conf.tolist(),
        float(np.trace(conf) / conf.sum()),
        edges[:-1].tolist(),
        counts.tolist(),
        mean_ci(diff),
    )


SPLITS = {
    "normal_vs_rest": 5.0,
    "normal_mild_vs_rest": 15.0,
    "below_severe_vs_severe": 30.0,
}


def roc_curve_points(pred_pos: np.ndarray, truth_pos: np.ndarray) -> tuple[float, float]:
    tp = np.sum(pred_pos & truth_pos)
    fn = np.sum(~pred_pos & truth_pos)
    fp = np.sum(pred_pos & ~truth_pos)
    tn = np.sum(~pred_pos & ~truth_pos)
    return float(fp / (fp + tn)), float(tp / (tp + fn))


def trapezoid_auc(points: Iterable[tuple[float, float]]) -> tuple[list, float]:
    """Sort (fpr, tpr) points, add the corners and integrate."""
    pts = sorted(set(points) | {(0.0, 0.0), (1.0, 1.0)})
    fpr = np.array([p[0] for p in pts])
    tpr = np.array([p[1] for p in pts])
    return pts, float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def threshold_grid(n: int = 101) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def ahi_category_roc(
    recordings: Sequence,
    truth_ahi: Sequence[float],
    split: str,
    ahi_at_threshold: Callable[[object, float], float],
    thresholds: np.ndarray | None = None,
) -> tuple[list, float]:
    """ROC over decision thresholds for one binarized AHI split.

    ``ahi_at_threshold(recording, thr)`` must return the predicted AHI of a
    recording after thresholding, smoothing, event formation and wake
    exclusion; the pipeline supplies it.
    """
    cut = SPLITS[split]
    truth_pos = np.asarray(truth_ahi, dtype=np.float64) >= cut
    if truth_pos.all() or not truth_pos.any():
        raise SingleClass(f"split {split!r} has recordings on one side only")
    grid = threshold_grid() if thresholds is None else np.asarray(thresholds)
    points = []
    for thr in grid:
        pred = np.array([ahi_at_threshold(rec, float(thr)) for rec in recordings]) >= cut
        points.append(roc_curve_points(pred, truth_pos))
    return trapezoid_auc(points)


# -- SpO2 burden, summaries ---------------------------------------------------


def spo2_burden(spo2: SignalTrace | None, hypnogram: Hypnogram) -> float:
    """Mean deficit below the sleep-time median SpO2, over sleep time."""
    if spo2 is None:
        raise MissingSignal("SpO2 burden needs an SpO2 trace")
    t = spo2.times()
    idx = np.floor(t / hypnogram.epoch_s).astype(np.int64)
    sleep_stage = np.array([s.is_sleep for s in hypnogram.stages] + [False])
    idx = np.where((idx >= 0) & (idx < len(hypnogram.stages)), idx, len(hypnogram.stages))
    asleep = sleep_stage[idx]
    if not asleep.any():
        raise ZeroSleep("no SpO2 samples during sleep")
    v = spo2.samples[asleep]
    return float(np.mean(np.maximum(0.0, np.median(v) - v)))


def mean_ci(values: Sequence[float]) -> dict:
    """Sample mean with a normal-approximation 95 % interval (sd with ddof=1)."""
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size < 2:
        raise TooFew("confidence interval needs at least two values")
    m = float(v.mean())
    half = 1.96 * float(v.std(ddof=1)) / math.sqrt(v.size)
    return {"mean": m, "lo95": m - half, "hi95": m + half, "n": int(v.size)}


def filter_min_events(recordings: Sequence, min_events: int = 5, count: Callable | None = None) -> list:
    """Keep recordings with at least ``min_events`` truth events."""
    count = count or (lambda rec: len(rec.respiratory_events()))
    kept = [r for r in recordings if count(r) >= min_events]
    if len(kept) < len(recordings):
        logger.info("excluded %d recording(s) with < %d truth events", len(recordings) - len(kept), min_events)
    return kept
