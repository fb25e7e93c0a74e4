"""Iterative feature elimination guided by Ward clusters and permutation importance."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .errors import DegenerateMatrix, DimensionMismatch, SingleClass
from .featurize import Family, FeatureMatrix, Source, parse_feature_name
from .forest import ForestModel, ForestParams, predict_proba, train_forest
from .metrics import f1_at, roc_auc
from .recording import atomic_write_text

logger = logging.getLogger(__name__)

MIN_FEATURES = 10
ELIMINATE_FRACTION = 0.10


def zero_variance(X: FeatureMatrix, tol: float = 1e-12) -> list[str]:
    return [n for n, s in zip(X.names, X.values.std(axis=0)) if not s > tol]


def cluster_features(X: FeatureMatrix, tau: float = 0.5) -> dict[str, int]:
    """Ward clusters of standardized feature columns, cut at ``tau`` x the top merge height.

    Zero-variance columns are left out of the mapping (callers drop them).
    Cluster ids are numbered by first appearance in column order.
    """
    dead = set(zero_variance(X))
    if dead:
        logger.info("dropping %d zero-variance feature(s) before clustering: %s", len(dead), sorted(dead)[:5])
    names = [n for n in X.names if n not in dead]
    if len(names) < 2:
        raise DegenerateMatrix("clustering needs at least two non-constant features")
    cols = [X.names.index(n) for n in names]
    v = X.values[:, cols]
    z = (v - v.mean(axis=0)) / v.std(axis=0)
    link = linkage(z.T, method="ward")
    top = float(link[:, 2].max())
    if top <= 0:
        raw = np.ones(len(names), dtype=int)
    else:
        raw = fcluster(link, t=tau * top, criterion="distance")
    renum: dict[int, int] = {}
    return {n: renum.setdefault(int(c), len(renum)) for n, c in zip(names, raw)}


def permutation_importance(
    model: ForestModel, X_val: FeatureMatrix, repeats: int = 3, seed: int = 0
) -> dict[str, float]:
    """Drop in validation ROC AUC when one column is shuffled (mean over ``repeats``)."""
    if tuple(X_val.names) != model.registry:
        raise DimensionMismatch("validation columns do not match the model registry")
    base = roc_auc(predict_proba(model, X_val), X_val.labels)
    out = {}
    values = X_val.values.copy()
    for j, name in enumerate(X_val.names):
        rng = np.random.default_rng([seed, j])
        orig = values[:, j].copy()
        scores = []
        for _ in range(repeats):
            values[:, j] = orig[rng.permutation(orig.size)]
            scores.append(roc_auc(predict_proba(model, values), X_val.labels))
        values[:, j] = orig
        out[name] = base - float(np.mean(scores))
    return out


def eliminate(
    surviving: Sequence[str],
    importances: dict[str, float],
    clusters: dict[str, int],
    fraction: float = ELIMINATE_FRACTION,
    floor: int = MIN_FEATURES,
) -> list[str]:
    """Remove the bottom ``fraction`` of features, keeping one member of any
    cluster whose surviving members (two or more) all fall in the bottom set.

    Ordering among equal importances follows the surviving-list order, which
    is the canonical registry order.
    """
    n = len(surviving)
    if n <= floor:
        return list(surviving)
    k = min(max(1, int(math.floor(fraction * n))), n - floor)
    pos = {name: i for i, name in enumerate(surviving)}
    ranked = sorted(surviving, key=lambda f: (importances[f], pos[f]))
    bottom = set(ranked[:k])
    members: dict[int, list[str]] = {}
    for f in surviving:
        members.setdefault(clusters.get(f, -1 - pos[f]), []).append(f)
    for group in members.values():
        if len(group) >= 2 and all(f in bottom for f in group):
            best = min(group, key=lambda f: (-importances[f], pos[f]))
            bottom.discard(best)
    return [f for f in surviving if f not in bottom]


@dataclass
class SelectionTrace:
    fold: int
    clusters: dict[str, int]
    iterations: list[dict] = field(default_factory=list)

    def sizes(self) -> list[int]:
        return [len(it["surviving"]) for it in self.iterations]

    def at_size(self, n: int) -> list[str]:
        """Surviving set of the smallest iteration with at least ``n`` features."""
        fits = [it for it in self.iterations if len(it["surviving"]) >= n]
        return list(min(fits, key=lambda it: len(it["surviving"]))["surviving"])

    def to_json(self) -> dict:
        return {"fold": self.fold, "clusters": self.clusters, "iterations": self.iterations}


def select_fold(
    train: FeatureMatrix,
    val: FeatureMatrix,
    hp: ForestParams,
    fold: int = 0,
    tau: float = 0.5,
    repeats: int = 3,
    floor: int = MIN_FEATURES,
) -> SelectionTrace:
    clusters = cluster_features(train, tau)
    surviving = [n for n in train.names if n in clusters]
    if len(surviving) < floor:
        raise DegenerateMatrix(f"only {len(surviving)} usable features, need {floor}")
    trace = SelectionTrace(fold, clusters)
    while True:
        tr, va = train.columns(surviving), val.columns(surviving)
        model = train_forest(tr, hp)
        proba = predict_proba(model, va)
        trace.iterations.append(
            {"surviving": list(surviving), "val_roc_auc": roc_auc(proba, va.labels), "val_f1": f1_at(proba, va.labels)}
        )
        if len(surviving) <= floor:
            return trace
        imp = permutation_importance(model, va, repeats, seed=hp.seed + 7919 * len(surviving))
        nxt = eliminate(surviving, imp, clusters, floor=floor)
        if len(nxt) >= len(surviving):
            raise DegenerateMatrix("elimination made no progress")
        surviving = nxt
        logger.debug("fold %d: %d features left", fold, len(surviving))


@dataclass
class SelectionResult:
    traces: list[SelectionTrace]
    curve: list[dict]  # one row per iteration size
    chosen_count: int
    selected: dict[int, list[str]]  # fold -> feature names
    pruned_raw: bool = False


def selection_curve(traces: Sequence[SelectionTrace]) -> list[dict]:
    by_size: dict[int, list[tuple[float, float]]] = {}
    for tr in traces:
        for it in tr.iterations:
            by_size.setdefault(len(it["surviving"]), []).append((it["val_roc_auc"], it["val_f1"]))
    return [
        {
            "n_features": n,
            "median_auc": float(np.median([a for a, _ in v])),
            "median_f1": float(np.median([f for _, f in v])),
            "n_folds": len(v),
        }
        for n, v in sorted(by_size.items(), reverse=True)
    ]


def choose_count(curve: Sequence[dict], cap: int) -> int:
    """Best median AUC among sizes <= cap; ties go to the smaller count."""
    rows = [r for r in curve if r["n_features"] <= cap] or [min(curve, key=lambda r: r["n_features"])]
    return min(rows, key=lambda r: (-r["median_auc"], r["n_features"]))["n_features"]


def _complexity_source(name: str) -> Source | None:
    try:
        spec = parse_feature_name(name)
    except DimensionMismatch:
        return None
    return spec.source if spec.family in (Family.SAMPLE_ENTROPY, Family.KATZ_FD) else None


def raw_source_prunable(final_sets: Sequence[Sequence[str]]) -> bool:
    """True when smoothed entropy/FD features are at least as frequent as raw ones
    among the final (smallest) feature sets across folds."""
    count = {Source.RAW: 0, Source.SMOOTHED: 0}
    if not any(_complexity_source(n) is not None for names in final_sets for n in names):
        return False
    for names in final_sets:
        for n in names:
            src = _complexity_source(n)
            if src is not None:
                count[src] += 1
    return count[Source.SMOOTHED] >= count[Source.RAW]


def drop_raw_complexity(names: Sequence[str]) -> list[str]:
    return [n for n in names if _complexity_source(n) is not Source.RAW]


def run_selection(
    folds: Sequence[tuple[FeatureMatrix, FeatureMatrix]],
    hp: ForestParams,
    tau: float = 0.5,
    repeats: int = 3,
    cap: int = 51,
    prune_raw: bool = True,
) -> SelectionResult:
    if not folds:
        raise SingleClass("selection needs at least one fold")
    traces = [select_fold(tr, va, hp, k, tau, repeats) for k, (tr, va) in enumerate(folds)]
    curve = selection_curve(traces)
    chosen = choose_count(curve, cap)
    selected = {t.fold: t.at_size(chosen) for t in traces}
    pruned = False
    if prune_raw and raw_source_prunable([t.iterations[-1]["surviving"] for t in traces]):
        pruned = True
        selected = {k: drop_raw_complexity(v) or v for k, v in selected.items()}
    return SelectionResult(traces, curve, chosen, selected, pruned)


def save_selection(result: SelectionResult, out_dir: Path) -> None:
    out = Path(out_dir)
    for t in result.traces:
        atomic_write_text(
            out / f"fold{t.fold}" / "selection_trace.json", json.dumps(t.to_json(), indent=1, sort_keys=True) + "\n"
        )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_features", "median_auc", "median_f1", "n_folds"])
    for r in result.curve:
        w.writerow([r["n_features"], repr(r["median_auc"]), repr(r["median_f1"]), r["n_folds"]])
    atomic_write_text(out / "selection_curve.csv", buf.getvalue())
    doc = {
        "chosen_count": result.chosen_count,
        "pruned_raw": result.pruned_raw,
        "selected": {str(k): v for k, v in sorted(result.selected.items())},
    }
    atomic_write_text(out / "selection.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_selection(out_dir: Path) -> dict[int, list[str]]:
    doc = json.loads((Path(out_dir) / "selection.json").read_text(encoding="utf-8"))
    return {int(k): list(v) for k, v in doc["selected"].items()}
