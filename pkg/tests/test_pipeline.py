from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apnea_kit import pipeline as pl
from apnea_kit.config import Flavor, HyperGrid, RunConfig, SelectionConfig
from apnea_kit.errors import ConfigError, InvariantViolation, TooFewSubjects
from apnea_kit.forest import load_model, save_model
from apnea_kit.recording import EventAnnotation, Hypnogram, Stage
from apnea_kit.synth import SynthSpec, write_cohort


@given(st.integers(3, 40), st.integers(3, 10), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_folds_partition_subjects(n, k, seed):
    subjects = [f"S{i:03d}" for i in range(n)]
    if n < k:
        with pytest.raises(TooFewSubjects):
            pl.make_folds(subjects, k, seed)
        return
    plans = pl.make_folds(subjects, k, seed)
    assert sorted(s for p in plans for s in p.test) == subjects
    for p in plans:
        assert set(p.train) | set(p.val) | set(p.test) == set(subjects)
        assert not (set(p.train) & set(p.val)) and not (set(p.train) & set(p.test)) and not (set(p.val) & set(p.test))
    assert plans == pl.make_folds(subjects[::-1], k, seed)


def smooth_oracle(x, i):
    out = np.zeros(len(x), dtype=bool)
    for a in range(0, len(x), 10):
        seg = x[a : a + 10]
        need = math.ceil(i * len(seg) / 10)
        out[a : a + 10] = sum(seg) >= need
    return out


@given(st.lists(st.booleans(), max_size=95), st.integers(1, 10))
@settings(max_examples=200, deadline=None)
def test_smoothing_matches_oracle(x, i):
    np.testing.assert_array_equal(pl.smooth_predictions(np.array(x, dtype=bool), i), smooth_oracle(x, i))


def test_smoothing_monotone_in_i():
    x = np.random.default_rng(0).random(500) < 0.5
    counts = [pl.smooth_predictions(x, i).sum() for i in range(1, 11)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_events_from_runs_with_wake_exclusion():
    hyp = Hypnogram((Stage.N2, Stage.WAKE, Stage.N2))
    mask = np.zeros(90, dtype=bool)
    mask[5:15] = True  # sleep
    mask[32:50] = True  # mostly wake
    mask[55:65] = True  # 5 s wake, 5 s sleep: kept under majority, dropped when strict
    ev = pl.predictions_to_events(mask, hyp)
    assert [(e.start_s, e.duration_s) for e in ev] == [(5, 10), (55, 10)]
    assert len(pl.predictions_to_events(mask, hyp, wake_mode="strict")) == 1


def test_timeline_placement():
    t = pl.timeline(10, 3, np.array([1.0, 2.0, 3.0]), math.nan)
    assert np.isnan(t[:3]).all() and list(t[3:6]) == [1, 2, 3] and np.isnan(t[6:]).all()


def test_empty_grid_is_config_error():
    with pytest.raises(ConfigError, match="empty"):
        HyperGrid(min_samples_split=())
    with pytest.raises(ConfigError, match="empty"):
        RunConfig.from_dict({"grid": {"decision_threshold": []}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"nonsense": 1})


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    write_cohort(SynthSpec(n_subjects=6, nights_per_subject=1, hours=1.0, seed=8), root / "data")
    cfg = RunConfig(
        data_dir=str(root / "data"),
        output_dir=str(root / "runs"),
        k_folds=3,
        n_trees=5,
        train_stride_s=20,
        top_k=1,
        grid=HyperGrid(min_samples_split=(50,), neg_subsample_ratio=(2.0,), class_weight_pos=(1.0, 2.0)),
        selection=SelectionConfig(enabled=False),
    )
    run_dir = pl.run_pipeline(cfg)
    return cfg, run_dir


def test_run_layout(small_run):
    cfg, run_dir = small_run
    for name in ("provenance.json", "folds.json", "summary.json", "event_metrics.csv", "ahi_report.json", "roc_points.csv"):
        assert (run_dir / name).exists(), name
    for k in range(3):
        for f in cfg.flavor_list:
            d = run_dir / f"fold{k}" / f.value
            assert (d / "model.json").exists() and (d / "DONE").exists()
            rows = pl.read_predictions(d / "predictions.csv")
            assert set(rows) == set(json.loads((d / "events.json").read_text()))
    prov = json.loads((run_dir / "provenance.json").read_text())
    assert prov["registry_size"]["RespOnly"] == 214


def test_leakage_audit(small_run):
    cfg, run_dir = small_run
    cohort = pl.load_cohort(cfg)
    folds = pl.load_folds(run_dir)
    assert pl.audit_leakage(run_dir, folds, cohort, cfg.flavor_list) == 3 * 3
    path = run_dir / "fold0" / "RespOnly" / "model.json"
    original = path.read_bytes()
    model = load_model(path)
    leaked = next(i.recording_id for i in cohort if i.subject_id in folds[0].test)
    model.provenance["train_recordings"] = model.provenance["train_recordings"] + [leaked]
    save_model(model, path)
    try:
        with pytest.raises(InvariantViolation, match="non-training"):
            pl.audit_leakage(run_dir, folds, cohort, cfg.flavor_list)
    finally:
        path.write_bytes(original)


def test_resume_skips_finished_work(small_run):
    cfg, run_dir = small_run
    d = run_dir / "fold1" / "RespSpo2"
    stamps = {p: p.stat().st_mtime_ns for p in d.rglob("*.json")}
    (d / "DONE").unlink()  # pretend the final step of one fold was interrupted
    pl.run_pipeline(cfg)
    assert (d / "DONE").exists()
    # trained search models were reused, not retrained
    for p, t in stamps.items():
        if "search" in p.parts:
            assert p.stat().st_mtime_ns == t


def test_predictions_match_events(small_run):
    cfg, run_dir = small_run
    cohort = {i.recording_id: i for i in pl.load_cohort(cfg)}
    d = run_dir / "fold2" / "RespOnly"
    model = load_model(d / "model.json")
    events = json.loads((d / "events.json").read_text())
    for rid, scores in pl.read_predictions(d / "predictions.csv").items():
        info = cohort[rid]
        pp = pl.postprocess(np.nan_to_num(scores, nan=-np.inf), model.decision_threshold, model.i_positive_predictions, info.hypnogram)
        assert [e.to_json() for e in pp.events] == events[rid]


def test_lag_evaluation_runs(small_run):
    cfg, run_dir = small_run
    out = pl.lag_evaluation(cfg, run_dir, pl.load_cohort(cfg), 25.0, [Flavor.RESP_SPO2])
    doc = out["flavors"]["RespSpo2"]
    assert doc["n_recordings"] > 0
    assert doc["degradation"] == pytest.approx(doc["aligned_auc"] - doc["shifted_auc"])
    assert (run_dir / "lag_eval_25s.json").exists()
