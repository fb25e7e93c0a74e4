"""Cross-validated training, search, per-second prediction and event formation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autolabel import RULE3, RULE4, relabel
from .config import Flavor, LabelSource, RunConfig
from .errors import InvariantViolation, MissingSignal, SingleClass, TooFewSubjects
from .featurize import (
    ANCHOR_S,
    Family,
    FeatureBank,
    FeatureMatrix,
    FeatureSpec,
    Source,
    build_bank,
    gather,
    parse_feature_name,
    registry_hash,
    registry_names,
)
from .forest import (
    ForestModel,
    Spo2OnlyModel,
    load_model,
    predict_proba,
    save_model,
    spo2_drop_scores,
    train_forest,
)
from .metrics import roc_auc
from .recording import (
    EventAnnotation,
    EventKind,
    Hypnogram,
    RecordingBundle,
    SignalTrace,
    atomic_write_text,
    event_list,
    find_bundles,
    load_bundle,
    rasterize,
)
from .select import load_selection, run_selection, save_selection

logger = logging.getLogger(__name__)

SEGMENT_S = 10


# -- folds --------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    fold_id: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def role(self, subject_id: str) -> str:
        if subject_id in self.test:
            return "test"
        if subject_id in self.val:
            return "val"
        return "train"


def make_folds(subjects: Sequence[str], k: int = 10, seed: int = 0) -> list[FoldPlan]:
    """Shuffle unique subjects, split into k blocks: block i tests, block i+1 validates."""
    uniq = sorted(set(subjects))
    if len(uniq) < k:
        raise TooFewSubjects(f"{len(uniq)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(uniq))
    blocks = [sorted(uniq[j] for j in part) for part in np.array_split(order, k)]
    plans = []
    for i in range(k):
        test, val = blocks[i], blocks[(i + 1) % k]
        train = sorted(s for j, b in enumerate(blocks) if j not in (i, (i + 1) % k) for s in b)
        plans.append(FoldPlan(i, tuple(train), tuple(val), tuple(test)))
    return plans


# -- per-second post-processing -------------------------------------------------


def smooth_predictions(per_second: np.ndarray, i_positive_predictions: int) -> np.ndarray:
    """10 s segments become all-positive when they hold >= i positives.

    A trailing partial segment of length L needs ceil(i * L / 10) positives.
    """
    i = int(i_positive_predictions)
    if not 1 <= i <= SEGMENT_S:
        raise ValueError("i_positive_predictions must be in [1, 10]")
    x = np.asarray(per_second).astype(bool)
    n = x.size
    out = np.zeros(n, dtype=bool)
    n_full = n // SEGMENT_S
    if n_full:
        counts = x[: n_full * SEGMENT_S].reshape(n_full, SEGMENT_S).sum(axis=1)
        out[: n_full * SEGMENT_S] = np.repeat(counts >= i, SEGMENT_S)
    rest = n - n_full * SEGMENT_S
    if rest:
        need = math.ceil(i * rest / SEGMENT_S)
        out[n_full * SEGMENT_S :] = x[n_full * SEGMENT_S :].sum() >= need
    return out


def runs_of(mask: np.ndarray) -> list[tuple[int, int]]:
    edges = np.diff(np.r_[0, np.asarray(mask, dtype=np.int8), 0])
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


def predictions_to_events(
    per_second: np.ndarray, hypnogram: Hypnogram, start_s: float = 0.0, wake_mode: str = "majority"
) -> tuple[EventAnnotation, ...]:
    """Maximal positive runs, minus those lying (mostly, or at all when strict) in Wake."""
    from .metrics import in_wake

    events = []
    for a, b in runs_of(per_second):
        e = EventAnnotation(start_s + a, float(b - a), EventKind.PREDICTED)
        if not in_wake(e, hypnogram, strict=wake_mode == "strict"):
            events.append(e)
    return tuple(events)


def timeline(n_seconds: int, first_anchor: int, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Place per-window values at their anchor seconds on a 0..n-1 grid."""
    out = np.full(n_seconds, fill, dtype=np.float64)
    lo = max(0, first_anchor)
    hi = min(n_seconds, first_anchor + values.size)
    out[lo:hi] = values[lo - first_anchor : hi - first_anchor]
    return out


@dataclass(frozen=True)
class Postprocessed:
    presmooth: np.ndarray
    smoothed: np.ndarray
    events: tuple[EventAnnotation, ...]


def postprocess(
    scores: np.ndarray, threshold: float, i_pos: int, hypnogram: Hypnogram, wake_mode: str = "majority"
) -> Postprocessed:
    """Threshold, smooth and turn a per-second score timeline into events."""
    pre = scores >= threshold
    sm = smooth_predictions(pre, i_pos)
    return Postprocessed(pre, sm, predictions_to_events(sm, hypnogram, 0.0, wake_mode))


def predicted_ahi(events: Sequence[EventAnnotation], hypnogram: Hypnogram) -> float:
    hours = hypnogram.sleep_hours
    return len(events) / hours if hours > 0 else 0.0


# -- cohort and feature cache -------------------------------------------------


@dataclass(eq=False)
class RecordingInfo:
    recording_id: str
    subject_id: str
    path: Path
    n_seconds: int
    first_s: int  # first window start
    n_windows: int
    truth: tuple[EventAnnotation, ...]  # respiratory events of the label source
    hypnogram: Hypnogram
    spo2: SignalTrace | None
    bank_file: Path
    ahi_true: float = 0.0
    annotations: tuple = field(default=(), repr=False)

    @property
    def first_anchor(self) -> int:
        return self.first_s + ANCHOR_S

    def labels(self) -> np.ndarray:
        return rasterize(self.truth, self.n_windows, self.first_anchor).astype(np.int8)

    def load_bank(self) -> FeatureBank:
        return load_bank(self.bank_file, self)


def union_registry(flavors: Sequence[Flavor]) -> tuple[FeatureSpec, ...]:
    seen: dict[str, FeatureSpec] = {}
    for f in flavors:
        for spec in f.registry():
            seen.setdefault(spec.name, spec)
    return tuple(seen.values())


def _file_digest(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p.exists():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _key_str(key: tuple) -> str:
    fam, width, src = key
    return f"{fam.value}|{width:g}|{src.value if src is not None else ''}"


def _key_parse(s: str) -> tuple:
    fam, width, src = s.split("|")
    w = float(width)
    return (Family(fam), int(w) if w.is_integer() else w, Source(src) if src else None)


def save_bank(bank: FeatureBank, path: Path) -> None:
    arrays = {"first_s": np.array(bank.first_s), "window_starts": bank.window_starts}
    for k, v in bank.series.items():
        arrays["s:" + _key_str(k)] = v
    for k, v in bank.spo2_valid.items():
        arrays["v:" + _key_str(k)] = v
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_bank(path: Path, info: RecordingInfo) -> FeatureBank:
    with np.load(path) as z:
        series = {_key_parse(k[2:]): z[k] for k in z.files if k.startswith("s:")}
        valid = {_key_parse(k[2:]): z[k] for k in z.files if k.startswith("v:")}
        starts = z["window_starts"]
        first_s = int(z["first_s"])
    return FeatureBank(info.recording_id, info.subject_id, first_s, starts, info.labels(), series, valid)


def _bundle_for_source(directory: Path, source: LabelSource) -> RecordingBundle:
    """Load a bundle whose annotations are those of the label source.

    Auto labels are read from their file when present, otherwise scored on the fly.
    """
    fname = source.annotations_file
    if source is LabelSource.EXPERT4 or (directory / fname).exists():
        return load_bundle(directory, fname)
    bundle = load_bundle(directory)
    if bundle.airflow is None:
        raise MissingSignal(f"{directory}: label source {source.value} needs an airflow trace")
    rule = RULE4 if source is LabelSource.AUTO4 else RULE3
    logger.info("%s: scoring %s labels on the fly", bundle.recording_id, source.value)
    return bundle.with_annotations(relabel(bundle, rule))


def _build_one(args) -> tuple[str, dict]:
    directory, source_value, flavor_values, cache_dir = args
    source = LabelSource(source_value)
    flavors = [Flavor(f) for f in flavor_values]
    bundle = _bundle_for_source(Path(directory), source)
    for f in flavors:
        if f.needs_spo2 and bundle.spo2 is None:
            raise MissingSignal(f"{bundle.recording_id}: flavor {f.value} needs an SpO2 trace")
    registry = union_registry(flavors)
    files = [Path(directory) / n for n in ("respiration.csv", "spo2.csv")]
    key = hashlib.sha256(
        (registry_hash(registry_names(registry)) + _file_digest(files)).encode()
    ).hexdigest()[:16]
    bank_file = Path(cache_dir) / f"{bundle.recording_id}-{key}.npz"
    resp = bundle.respiration
    if not bank_file.exists():
        if not registry:
            from .featurize import window_starts_for

            starts = window_starts_for(resp)
            bank = FeatureBank(bundle.recording_id, bundle.subject_id, int(starts[0]), starts, np.zeros(starts.size, np.int8))
        else:
            bank = build_bank(bundle, registry)
        save_bank(bank, bank_file)
        logger.info("features cached for %s", bundle.recording_id)
    with np.load(bank_file) as z:
        first_s = int(z["first_s"])
        n_windows = int(z["window_starts"].size)
    truth = bundle.respiratory_events()
    meta = {
        "recording_id": bundle.recording_id,
        "subject_id": bundle.subject_id,
        "path": str(directory),
        "n_seconds": int(math.floor(resp.end_s)),
        "first_s": first_s,
        "n_windows": n_windows,
        "truth": [e.to_json() for e in truth],
        "annotations": [e.to_json() for e in bundle.annotations],
        "hypnogram": [[s.value for s in bundle.hypnogram.stages], bundle.hypnogram.epoch_s, bundle.hypnogram.assumed],
        "spo2": None if bundle.spo2 is None else [bundle.spo2.samples.tolist(), bundle.spo2.rate_hz, bundle.spo2.start_offset_s],
        "bank_file": str(bank_file),
    }
    return bundle.recording_id, meta


def _info_from_meta(meta: dict) -> RecordingInfo:
    from .metrics import compute_ahi
    from .errors import ZeroSleep

    def ev(items):
        return event_list(EventAnnotation(d["start_s"], d["duration_s"], EventKind(d["kind"])) for d in items)

    stages, epoch, assumed = meta["hypnogram"]
    hyp = Hypnogram(tuple(stages), epoch, assumed)
    sp = meta["spo2"]
    truth = ev(meta["truth"])
    try:
        ahi = compute_ahi(truth, hyp, exclude_wake=True)
    except ZeroSleep:
        ahi = 0.0
    return RecordingInfo(
        meta["recording_id"],
        meta["subject_id"],
        Path(meta["path"]),
        meta["n_seconds"],
        meta["first_s"],
        meta["n_windows"],
        truth,
        hyp,
        None if sp is None else SignalTrace(np.asarray(sp[0]), sp[1], sp[2]),
        Path(meta["bank_file"]),
        ahi,
        ev(meta["annotations"]),
    )


def load_cohort(cfg: RunConfig, jobs: int = 1) -> list[RecordingInfo]:
    """Load every bundle and make sure its feature bank is cached."""
    dirs = find_bundles(Path(cfg.data_dir))
    if not dirs:
        raise MissingSignal(f"no recordings found under {cfg.data_dir}")
    cache = cfg.resolved_cache_dir
    cache.mkdir(parents=True, exist_ok=True)
    flavors = [f.value for f in cfg.flavor_list]
    tasks = [(str(d), cfg.label_source, flavors, str(cache)) for d in dirs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            metas = list(ex.map(_build_one, tasks))
    else:
        metas = [_build_one(t) for t in tasks]
    infos = [_info_from_meta(m) for _, m in sorted(metas, key=lambda x: x[0])]
    ids = [i.recording_id for i in infos]
    if len(set(ids)) != len(ids):
        raise InvariantViolation("duplicate recording ids in data directory")
    return infos


# -- feature matrices ---------------------------------------------------------


def specs_for(names: Sequence[str]) -> tuple[FeatureSpec, ...]:
    return tuple(parse_feature_name(n) for n in names)


def strided_rows(info: RecordingInfo, bank: FeatureBank, stride: int) -> np.ndarray:
    return np.flatnonzero(bank.window_starts % stride == 0)


class MatrixCache:
    """Strided training rows per recording, gathered once per registry."""

    def __init__(self, cohort: Sequence[RecordingInfo], registry: Sequence[FeatureSpec], stride: int):
        self.registry = tuple(registry)
        self.rows: dict[str, FeatureMatrix] = {}
        for info in cohort:
            bank = info.load_bank()
            self.rows[info.recording_id] = gather(bank, self.registry, strided_rows(info, bank, stride))

    def matrix(self, recordings: Sequence[str], names: Sequence[str] | None = None) -> FeatureMatrix:
        fm = FeatureMatrix.concat([self.rows[r] for r in recordings])
        return fm if names is None else fm.columns(names)


def recordings_of(cohort: Sequence[RecordingInfo], subjects: Sequence[str]) -> list[RecordingInfo]:
    s = set(subjects)
    return [i for i in cohort if i.subject_id in s]


def full_matrix(info: RecordingInfo, names: Sequence[str], bank: FeatureBank | None = None) -> FeatureMatrix:
    bank = bank or info.load_bank()
    return gather(bank, specs_for(names))


def window_auc(proba: np.ndarray, labels: np.ndarray) -> float | None:
    try:
        return roc_auc(proba, labels)
    except SingleClass:
        return None


# -- artifact io --------------------------------------------------------------


def write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def write_json(path: Path, doc) -> None:
    atomic_write_text(Path(path), json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _fmt(v: float) -> str:
    return repr(float(v))


def predictions_csv(rows: Sequence[tuple[str, int, np.ndarray, Postprocessed, int]]) -> str:
    """rows: (recording_id, n_seconds, score timeline (nan = no window), postprocessed, _)"""
    buf = io.StringIO()
    buf.write("recording_id,t_s,proba,hard_label_presmooth,hard_label\n")
    for rid, n, scores, pp, _ in rows:
        for t in range(n):
            s = scores[t]
            buf.write(f"{rid},{t},{'' if math.isnan(s) else _fmt(s)},{int(pp.presmooth[t])},{int(pp.smoothed[t])}\n")
    return buf.getvalue()


def read_predictions(path: Path) -> dict[str, np.ndarray]:
    """recording_id -> score timeline (nan where no window anchors)."""
    out: dict[str, list] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for rid, _, p, _, _ in reader:
            out.setdefault(rid, []).append(float(p) if p else math.nan)
    return {k: np.asarray(v) for k, v in out.items()}


def events_json(per_recording: dict[str, Sequence[EventAnnotation]]) -> dict:
    return {rid: [e.to_json() for e in evs] for rid, evs in sorted(per_recording.items())}


# -- search -------------------------------------------------------------------


def _stage_dir(run_dir: Path, fold: int, flavor: Flavor) -> Path:
    return run_dir / f"fold{fold}" / flavor.value


def feature_sets(
    cfg: RunConfig, flavor: Flavor, folds: Sequence[FoldPlan], cohort: Sequence[RecordingInfo], run_dir: Path
) -> dict[int, list[str]]:
    """Per-fold feature names: the selection output when enabled, else the full registry."""
    names = list(registry_names(flavor.registry()))
    if not cfg.selection.enabled:
        return {p.fold_id: names for p in folds}
    sel_dir = run_dir / "selection" / flavor.value
    if (sel_dir / "selection.json").exists():
        return load_selection(sel_dir)
    cache = MatrixCache(cohort, flavor.registry(), cfg.selection.stride_s)
    pairs = []
    for p in folds:
        tr = cache.matrix([i.recording_id for i in recordings_of(cohort, p.train)])
        va = cache.matrix([i.recording_id for i in recordings_of(cohort, p.val)])
        pairs.append((tr, va))
    hp = cfg.forest_params(cfg.grid.min_samples_split[0], cfg.grid.neg_subsample_ratio[0], cfg.grid.class_weight_pos[0])
    hp = type(hp)(cfg.selection.n_trees, hp.min_samples_split, None, hp.class_weight_pos, hp.neg_subsample_ratio, hp.seed)
    result = run_selection(pairs, hp, cfg.selection.tau, cfg.selection.repeats, cfg.feature_cap, cfg.selection.prune_raw)
    save_selection(result, sel_dir)
    return result.selected


def _config_name(idx: int) -> str:
    return f"c{idx:03d}"


def _train_stage1(
    cfg: RunConfig,
    flavor: Flavor,
    plan: FoldPlan,
    names: list[str],
    cache: MatrixCache,
    cohort: Sequence[RecordingInfo],
    run_dir: Path,
) -> list[ForestModel]:
    sdir = _stage_dir(run_dir, plan.fold_id, flavor) / "search"
    train_recs = recordings_of(cohort, plan.train)
    models = []
    X = None
    for idx, (ms, ratio, w) in enumerate(cfg.grid.train_configs()):
        path = sdir / f"{_config_name(idx)}.json"
        if path.exists():
            models.append(load_model(path))
            continue
        if X is None:
            X = cache.matrix([i.recording_id for i in train_recs], names)
        prov = {
            "fold": plan.fold_id,
            "flavor": flavor.value,
            "train_recordings": [i.recording_id for i in train_recs],
            "train_subjects": sorted({i.subject_id for i in train_recs}),
            "registry_hash": registry_hash(names),
            "train_rows": int(X.n_rows),
            "train_positives": int(X.labels.sum()),
        }
        model = train_forest(X, cfg.forest_params(ms, ratio, w), flavor.value, prov)
        save_model(model, path)
        logger.info("fold %d %s: trained %s (%d rows)", plan.fold_id, flavor.value, _config_name(idx), X.n_rows)
        models.append(model)
    return models


def _val_predictions(models, names, recs: Sequence[RecordingInfo], path: Path) -> dict[str, np.ndarray]:
    """Window probabilities of every config for each validation recording (cached in an npz)."""
    if path.exists():
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    out = {}
    for info in recs:
        X = full_matrix(info, names)
        for idx, m in enumerate(models):
            out[f"{_config_name(idx)}/{info.recording_id}"] = predict_proba(m, X)
    tmp = path.with_name(path.name + ".tmp.npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(tmp, **out)
    tmp.replace(path)
    return out


def _pooled_auc(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> float | None:
    if not pairs:
        return None
    return window_auc(np.concatenate([p for p, _ in pairs]), np.concatenate([y for _, y in pairs]))


def _stage2(
    cfg: RunConfig,
    candidates: Sequence[tuple[int, dict[str, np.ndarray]]],
    thresholds: Sequence[float],
    i_values: Sequence[int],
    val_info: Sequence[tuple[int, RecordingInfo]],
) -> tuple[list[dict], tuple]:
    """Mean |AHI error| over validation recordings for each (config, threshold, i)."""
    rows = []
    best = None
    for cidx, scores in candidates:
        for thr in thresholds:
            for i in i_values:
                errs: dict[int, list[float]] = {}
                for fold, info in val_info:
                    s = scores[info.recording_id]
                    pp = postprocess(s, thr, i, info.hypnogram, cfg.wake_exclusion)
                    errs.setdefault(fold, []).append(abs(predicted_ahi(pp.events, info.hypnogram) - info.ahi_true))
                flat = [e for v in errs.values() for e in v]
                mae = float(np.mean(flat))
                for fold, v in sorted(errs.items()):
                    rows.append(
                        {"stage": 2, "config": cidx, "fold": fold, "decision_threshold": thr, "i": int(i), "mae_ahi": float(np.mean(v))}
                    )
                key = (mae, cidx, thr, i)
                if best is None or key < best:
                    best = key
    return rows, best


def search_forest(
    cfg: RunConfig,
    flavor: Flavor,
    folds: Sequence[FoldPlan],
    cohort: Sequence[RecordingInfo],
    names_by_fold: dict[int, list[str]],
    run_dir: Path,
) -> dict:
    out_path = run_dir / "search" / flavor.value / "search_result.json"
    if out_path.exists():
        return json.loads(out_path.read_text(encoding="utf-8"))
    configs = cfg.grid.train_configs()
    cache = MatrixCache(cohort, flavor.registry(), cfg.train_stride_s)
    log: list[dict] = []
    aucs = np.full((len(configs), len(folds)), np.nan)
    val_scores: dict[int, dict[str, np.ndarray]] = {c: {} for c in range(len(configs))}
    val_info = []
    for plan in folds:
        names = names_by_fold[plan.fold_id]
        models = _train_stage1(cfg, flavor, plan, names, cache, cohort, run_dir)
        recs = recordings_of(cohort, plan.val)
        preds = _val_predictions(models, names, recs, _stage_dir(run_dir, plan.fold_id, flavor) / "search" / "val_proba.npz")
        for info in recs:
            val_info.append((plan.fold_id, info))
        for cidx in range(len(configs)):
            pairs = []
            for info in recs:
                p = preds[f"{_config_name(cidx)}/{info.recording_id}"]
                pairs.append((p, info.labels()))
                val_scores[cidx][info.recording_id] = timeline(info.n_seconds, info.first_anchor, p)
            auc = _pooled_auc(pairs)
            aucs[cidx, plan.fold_id] = np.nan if auc is None else auc
            ms, ratio, w = configs[cidx]
            log.append(
                {"stage": 1, "config": cidx, "fold": plan.fold_id, "min_samples_split": ms, "neg_subsample_ratio": ratio,
                 "class_weight_pos": w, "val_roc_auc": auc}
            )
    mean_auc = np.nanmean(np.where(np.isnan(aucs), np.nan, aucs), axis=1) if aucs.size else np.array([])
    mean_auc = np.where(np.isnan(mean_auc), -np.inf, mean_auc)
    order = sorted(range(len(configs)), key=lambda c: (-mean_auc[c], c))
    kept = order[: cfg.top_k]
    rows, best = _stage2(
        cfg, [(c, val_scores[c]) for c in kept], cfg.grid.decision_threshold, cfg.grid.i_positive_predictions, val_info
    )
    log.extend(rows)
    mae, cidx, thr, i = best
    ms, ratio, w = configs[cidx]
    result = {
        "flavor": flavor.value,
        "config_index": cidx,
        "min_samples_split": ms,
        "neg_subsample_ratio": ratio,
        "class_weight_pos": w,
        "decision_threshold": thr,
        "i_positive_predictions": int(i),
        "val_mae_ahi": mae,
        "stage1_mean_auc": {_config_name(c): (None if not np.isfinite(mean_auc[c]) else float(mean_auc[c])) for c in range(len(configs))},
        "kept": [_config_name(c) for c in kept],
    }
    write_jsonl(run_dir / "search" / flavor.value / "search_log.jsonl", log)
    write_json(out_path, result)
    return result


def spo2_scores(info: RecordingInfo) -> np.ndarray:
    """SpO2-only score timeline: the desaturation drop at each anchored second (nan elsewhere)."""
    if info.spo2 is None:
        raise MissingSignal(f"{info.recording_id}: flavor Spo2Only needs an SpO2 trace")
    anchors = info.first_anchor + np.arange(info.n_windows)
    return timeline(info.n_seconds, info.first_anchor, spo2_drop_scores(info.spo2, anchors), math.nan)


def search_spo2_only(cfg: RunConfig, folds: Sequence[FoldPlan], cohort: Sequence[RecordingInfo], run_dir: Path) -> dict:
    out_path = run_dir / "search" / Flavor.SPO2_ONLY.value / "search_result.json"
    if out_path.exists():
        return json.loads(out_path.read_text(encoding="utf-8"))
    scores = {i.recording_id: np.nan_to_num(spo2_scores(i), nan=0.0) for i in cohort}
    val_info = [(p.fold_id, info) for p in folds for info in recordings_of(cohort, p.val)]
    rows, best = _stage2(cfg, [(0, scores)], cfg.grid.spo2_desat_threshold, cfg.grid.i_positive_predictions, val_info)
    mae, _, thr, i = best
    result = {"flavor": Flavor.SPO2_ONLY.value, "desat_threshold_pct": thr, "i_positive_predictions": int(i), "val_mae_ahi": mae}
    write_jsonl(run_dir / "search" / Flavor.SPO2_ONLY.value / "search_log.jsonl", rows)
    write_json(out_path, result)
    return result


# -- final per-fold models and test predictions ---------------------------------


def _finish_fold(
    cfg: RunConfig, flavor: Flavor, plan: FoldPlan, cohort: Sequence[RecordingInfo], run_dir: Path, chosen: dict
) -> None:
    d = _stage_dir(run_dir, plan.fold_id, flavor)
    marker = d / "DONE"
    if marker.exists():
        return
    tests = recordings_of(cohort, plan.test)
    if flavor is Flavor.SPO2_ONLY:
        model = Spo2OnlyModel(chosen["desat_threshold_pct"], chosen["i_positive_predictions"])
        thr, i = model.desat_threshold_pct, model.i_positive_predictions
    else:
        base = load_model(d / "search" / f"{_config_name(chosen['config_index'])}.json")
        model = base.with_postprocessing(chosen["decision_threshold"], chosen["i_positive_predictions"])
        thr, i = model.decision_threshold, model.i_positive_predictions
    save_model(model, d / "model.json")
    rows, events, log = [], {}, []
    for info in tests:
        if flavor is Flavor.SPO2_ONLY:
            scores = spo2_scores(info)
        else:
            p = predict_proba(model, full_matrix(info, model.registry))
            scores = timeline(info.n_seconds, info.first_anchor, p, math.nan)
        pp = postprocess(np.nan_to_num(scores, nan=-np.inf), thr, i, info.hypnogram, cfg.wake_exclusion)
        rows.append((info.recording_id, info.n_seconds, scores, pp, 0))
        events[info.recording_id] = pp.events
        log.append(
            {"event": "test_prediction", "fold": plan.fold_id, "flavor": flavor.value, "recording_id": info.recording_id,
             "n_events": len(pp.events), "ahi_pred": predicted_ahi(pp.events, info.hypnogram), "ahi_true": info.ahi_true}
        )
    atomic_write_text(d / "predictions.csv", predictions_csv(rows))
    write_json(d / "events.json", events_json(events))
    head = {"event": "fold", "fold": plan.fold_id, "flavor": flavor.value, "train": list(plan.train), "val": list(plan.val),
            "test": list(plan.test), "decision_threshold": thr, "i_positive_predictions": i}
    write_jsonl(d / "log.jsonl", [head] + log)
    atomic_write_text(marker, "ok\n")


def run_flavor(cfg: RunConfig, flavor: Flavor, folds: Sequence[FoldPlan], cohort: Sequence[RecordingInfo], run_dir: Path) -> dict:
    """Search, then write final per-fold models and test predictions for one flavor."""
    for info in cohort:
        if flavor.needs_spo2 and info.spo2 is None:
            raise MissingSignal(f"{info.recording_id}: flavor {flavor.value} needs an SpO2 trace")
    if flavor is Flavor.SPO2_ONLY:
        chosen = search_spo2_only(cfg, folds, cohort, run_dir)
    else:
        names = feature_sets(cfg, flavor, folds, cohort, run_dir)
        chosen = search_forest(cfg, flavor, folds, cohort, names, run_dir)
    for plan in folds:
        _finish_fold(cfg, flavor, plan, cohort, run_dir, chosen)
    return chosen


def audit_leakage(run_dir: Path, folds: Sequence[FoldPlan], cohort: Sequence[RecordingInfo], flavors: Sequence[Flavor]) -> int:
    """Every fold model must have been trained on that fold's training subjects only."""
    subject_of = {i.recording_id: i.subject_id for i in cohort}
    checked = 0
    for plan in folds:
        allowed = set(plan.train)
        for f in flavors:
            if not f.uses_forest:
                continue
            model = load_model(_stage_dir(run_dir, plan.fold_id, f) / "model.json")
            recs = model.provenance.get("train_recordings")
            if recs is None:
                raise InvariantViolation(f"fold {plan.fold_id} {f.value}: model has no provenance")
            bad = [r for r in recs if subject_of.get(r) not in allowed]
            if bad:
                raise InvariantViolation(f"fold {plan.fold_id} {f.value}: trained on non-training recording {bad[0]}")
            checked += 1
    return checked


def provenance(cfg: RunConfig, cohort: Sequence[RecordingInfo]) -> dict:
    return {
        "code_version": __version__,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "registry_hash": {f.value: registry_hash(registry_names(f.registry())) for f in cfg.flavor_list},
        "registry_size": {f.value: len(f.registry()) for f in cfg.flavor_list},
        "recordings": [
            {"recording_id": i.recording_id, "subject_id": i.subject_id, "hypnogram_assumed": i.hypnogram.assumed}
            for i in cohort
        ],
    }


def run_pipeline(cfg: RunConfig, jobs: int = 1) -> Path:
    """Full cross-validated run; resumes from whatever stages already finished."""
    from .report import build_reports

    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    cohort = load_cohort(cfg, jobs)
    write_json(run_dir / "provenance.json", provenance(cfg, cohort))
    folds = make_folds([i.subject_id for i in cohort], cfg.k_folds, cfg.seed)
    write_json(run_dir / "folds.json", [vars(p) | {"train": list(p.train), "val": list(p.val), "test": list(p.test)} for p in folds])
    for flavor in cfg.flavor_list:
        logger.info("flavor %s", flavor.value)
        run_flavor(cfg, flavor, folds, cohort, run_dir)
    audit_leakage(run_dir, folds, cohort, cfg.flavor_list)
    build_reports(run_dir, cohort, cfg)
    return run_dir


def load_folds(run_dir: Path) -> list[FoldPlan]:
    doc = json.loads((Path(run_dir) / "folds.json").read_text(encoding="utf-8"))
    return [FoldPlan(d["fold_id"], tuple(d["train"]), tuple(d["val"]), tuple(d["test"])) for d in doc]


# -- lag robustness -----------------------------------------------------------


def lag_evaluation(
    cfg: RunConfig, run_dir: Path, cohort: Sequence[RecordingInfo], shift_s: float, flavors: Sequence[Flavor]
) -> dict:
    """Mean per-recording test AUC with aligned and with delayed SpO2.

    Models are the trained fold models; only the SpO2 series are recomputed
    from the shifted trace.
    """
    folds = load_folds(run_dir)
    out = {"shift_s": shift_s, "flavors": {}}
    for flavor in flavors:
        aligned, shifted = [], []
        for plan in folds:
            model = load_model(_stage_dir(run_dir, plan.fold_id, flavor) / "model.json")
            specs = specs_for(model.registry)
            for info in recordings_of(cohort, plan.test):
                bank = info.load_bank()
                y = bank.labels
                a = window_auc(predict_proba(model, gather(bank, specs)), y)
                moved = bank.with_spo2(info.spo2.shifted(shift_s), specs)
                s = window_auc(predict_proba(model, gather(moved, specs)), y)
                if a is not None and s is not None:
                    aligned.append(a)
                    shifted.append(s)
        out["flavors"][flavor.value] = {
            "aligned_auc": float(np.mean(aligned)),
            "shifted_auc": float(np.mean(shifted)),
            "degradation": float(np.mean(aligned) - np.mean(shifted)),
            "n_recordings": len(aligned),
        }
    write_json(Path(run_dir) / f"lag_eval_{shift_s:g}s.json", out)
    return out
