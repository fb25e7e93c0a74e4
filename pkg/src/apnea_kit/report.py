"""Cohort reports built from a run directory's on-disk artifacts."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import Flavor, RunConfig
from .errors import DegenerateVariance, MissingSignal, NoPositives, SingleClass, TooFew, ZeroSleep
from .forest import load_model
from .metrics import (
    CATEGORIES,
    SPLITS,
    MatchCounts,
    ahi_report,
    binary_metrics,
    categorize_ahi,
    filter_min_events,
    match_events,
    mean_ci,
    prc_auc,
    roc_auc,
    roc_curve_points,
    spo2_burden,
    threshold_grid,
    trapezoid_auc,
)
from .pipeline import RecordingInfo, load_folds, postprocess, predicted_ahi, read_predictions, recordings_of
from .recording import EventAnnotation, EventKind, atomic_write_text

logger = logging.getLogger(__name__)

METRIC_ROWS = ("accuracy", "sensitivity", "precision", "f1", "fpr", "roc_auc", "prc_auc")
SPO2_ONLY_GRID = np.linspace(0.0, 10.0, 101)


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _events(items) -> tuple[EventAnnotation, ...]:
    return tuple(EventAnnotation(d["start_s"], d["duration_s"], EventKind(d["kind"])) for d in items)


def recording_rows(run_dir: Path, cohort: Sequence[RecordingInfo], cfg: RunConfig, flavor: Flavor) -> list[dict]:
    """Per-recording evaluation of one flavor's test predictions."""
    rows = []
    for plan in load_folds(run_dir):
        d = run_dir / f"fold{plan.fold_id}" / flavor.value
        scores = read_predictions(d / "predictions.csv")
        events = json.loads((d / "events.json").read_text(encoding="utf-8"))
        for info in recordings_of(cohort, plan.test):
            pred = _events(events[info.recording_id])
            c = match_events(info.truth, pred, float(info.n_seconds))
            s = scores[info.recording_id]
            lo = info.first_anchor
            window_scores = s[lo : lo + info.n_windows]
            y = info.labels()
            try:
                auc, prc = roc_auc(window_scores, y), prc_auc(window_scores, y)
            except (SingleClass, NoPositives):
                auc = prc = None
            try:
                burden = spo2_burden(info.spo2, info.hypnogram)
            except (MissingSignal, ZeroSleep):
                burden = None
            rows.append(
                {
                    "flavor": flavor.value,
                    "fold": plan.fold_id,
                    "recording_id": info.recording_id,
                    "subject_id": info.subject_id,
                    "n_truth": len(info.truth),
                    "counts": c,
                    **{k: v for k, v in binary_metrics(c).items()},
                    "roc_auc": auc,
                    "prc_auc": prc,
                    "ahi_true": info.ahi_true,
                    "ahi_pred": predicted_ahi(pred, info.hypnogram),
                    "spo2_burden": burden,
                    "scores": s,
                    "info": info,
                }
            )
    return sorted(rows, key=lambda r: r["recording_id"])


def _ci_or_none(values) -> dict | None:
    v = [x for x in values if x is not None]
    try:
        return mean_ci(v)
    except TooFew:
        return {"mean": v[0], "lo95": None, "hi95": None, "n": 1} if v else None


def ahi_sweep(rows: Sequence[dict], flavor: Flavor, i_pos: int, wake_mode: str) -> dict:
    grid = SPO2_ONLY_GRID if flavor is Flavor.SPO2_ONLY else threshold_grid()
    pred = np.zeros((len(rows), grid.size))
    for r_idx, r in enumerate(rows):
        s = np.nan_to_num(r["scores"], nan=-np.inf)
        hyp = r["info"].hypnogram
        for g, thr in enumerate(grid):
            pred[r_idx, g] = predicted_ahi(postprocess(s, thr, i_pos, hyp, wake_mode).events, hyp)
    truth = np.array([r["ahi_true"] for r in rows])
    out = {}
    for split, cut in SPLITS.items():
        pos = truth >= cut
        if pos.all() or not pos.any():
            out[split] = None
            continue
        pts = [roc_curve_points(pred[:, g] >= cut, pos) for g in range(grid.size)]
        curve, auc = trapezoid_auc(pts)
        out[split] = {"auc": auc, "points": curve}
    return out


def build_reports(run_dir: Path, cohort: Sequence[RecordingInfo], cfg: RunConfig) -> dict:
    run_dir = Path(run_dir)
    flavors = cfg.flavor_list
    summary = {"flavors": {}, "table": {}, "event_counts": {}, "ahi_category_auc": {}}
    ahi_docs = {}
    ev_rows, scatter, confusion, roc_rows = [], [], [], []
    assumed = [i.recording_id for i in cohort if i.hypnogram.assumed]
    for flavor in flavors:
        rows = recording_rows(run_dir, cohort, cfg, flavor)
        kept_ids = {i.recording_id for i in filter_min_events([r["info"] for r in rows], cfg.min_events, lambda i: len(i.truth))}
        model_i = _i_pos(run_dir, flavor)
        per_metric = {}
        for m in METRIC_ROWS:
            per_metric[m] = _ci_or_none([r[m] for r in rows if r["recording_id"] in kept_ids])
        summary["flavors"][flavor.value] = per_metric
        pooled = sum((r["counts"] for r in rows), MatchCounts())
        summary["event_counts"][flavor.value] = {
            "tp": pooled.tp,
            "fp": pooled.fp,
            "fn": pooled.fn,
            "tn": pooled.tn,
            "annotated_events": sum(r["n_truth"] for r in rows),
            "total_sleep_hours": sum(r["info"].hypnogram.sleep_hours for r in rows),
            "pooled": binary_metrics(pooled),
            "sensitivity_by_kind": pooled.sensitivity_by_kind(),
        }
        pairs = [(r["ahi_true"], r["ahi_pred"]) for r in rows]
        try:
            rep = ahi_report(pairs)
            ahi_docs[flavor.value] = rep.to_json()
            for t, row in zip(CATEGORIES, rep.confusion):
                for p, n in zip(CATEGORIES, row):
                    confusion.append([flavor.value, t.value, p.value, n])
        except (TooFew, DegenerateVariance) as exc:
            ahi_docs[flavor.value] = {"error": str(exc)}
        for r in rows:
            scatter.append(
                [flavor.value, r["fold"], r["recording_id"], r["ahi_true"], r["ahi_pred"],
                 categorize_ahi(r["ahi_true"]).value, categorize_ahi(r["ahi_pred"]).value]
            )
            c = r["counts"]
            ev_rows.append(
                [flavor.value, r["fold"], r["recording_id"], r["subject_id"], r["n_truth"], c.tp, c.fp, c.fn, c.tn,
                 r["accuracy"], r["sensitivity"], r["precision"], r["f1"], r["fpr"], r["roc_auc"], r["prc_auc"],
                 r["ahi_true"], r["ahi_pred"], r["spo2_burden"], int(r["recording_id"] in kept_ids)]
            )
        sweep = ahi_sweep(rows, flavor, model_i, cfg.wake_exclusion)
        summary["ahi_category_auc"][flavor.value] = {k: (None if v is None else v["auc"]) for k, v in sweep.items()}
        for split, v in sweep.items():
            if v is not None:
                roc_rows.extend([flavor.value, split, fpr, tpr] for fpr, tpr in v["points"])
    summary["table"] = {
        m: {f.value: (summary["flavors"][f.value][m] or {}).get("mean") for f in flavors} for m in METRIC_ROWS
    }
    summary["ahi_r"] = {f: d.get("r") for f, d in ahi_docs.items()}
    summary["ahi_category_accuracy"] = {f: d.get("category_accuracy") for f, d in ahi_docs.items()}
    summary["hypnogram_assumed"] = assumed
    summary["min_events"] = cfg.min_events
    atomic_write_text(run_dir / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    atomic_write_text(run_dir / "ahi_report.json", json.dumps(ahi_docs, indent=1, sort_keys=True) + "\n")
    atomic_write_text(
        run_dir / "event_metrics.csv",
        _csv(
            ["flavor", "fold", "recording_id", "subject_id", "n_truth", "tp", "fp", "fn", "tn", "accuracy", "sensitivity",
             "precision", "f1", "fpr", "roc_auc", "prc_auc", "ahi_true", "ahi_pred", "spo2_burden", "in_mean_metrics"],
            ev_rows,
        ),
    )
    atomic_write_text(
        run_dir / "ahi_scatter.csv",
        _csv(["flavor", "fold", "recording_id", "ahi_true", "ahi_pred", "category_true", "category_pred"], scatter),
    )
    atomic_write_text(run_dir / "confusion.csv", _csv(["flavor", "category_true", "category_pred", "count"], confusion))
    atomic_write_text(run_dir / "roc_points.csv", _csv(["flavor", "split", "fpr", "tpr"], roc_rows))
    return summary


def _i_pos(run_dir: Path, flavor: Flavor) -> int:
    model = load_model(run_dir / "fold0" / flavor.value / "model.json")
    return int(model.i_positive_predictions)


def format_table(summary: dict) -> str:
    """Plain-text table: metrics as rows, flavors as columns."""
    flavors = list(summary["flavors"])
    lines = ["metric".ljust(14) + "".join(f.rjust(16) for f in flavors)]
    for m in METRIC_ROWS:
        cells = []
        for f in flavors:
            ci = summary["flavors"][f].get(m)
            cells.append("-".rjust(16) if not ci or ci["mean"] is None else f"{ci['mean']:.3f}".rjust(16))
        lines.append(m.ljust(14) + "".join(cells))
    for label, key in (("ahi_r", "ahi_r"), ("ahi_cat_acc", "ahi_category_accuracy")):
        lines.append(
            label.ljust(14)
            + "".join(("-" if summary[key].get(f) is None else f"{summary[key][f]:.3f}").rjust(16) for f in flavors)
        )
    return "\n".join(lines)
