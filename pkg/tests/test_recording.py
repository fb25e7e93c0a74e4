from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apnea_kit import recording as rc
from apnea_kit.errors import DataError, DegenerateSignal, EmptySlice, LoadError


def write_csv(path, t, v):
    path.write_text("t_s,value\n" + "".join(f"{a},{b}\n" for a, b in zip(t, v)))


def test_bundle_roundtrip(tmp_path, short_bundle):
    rc.save_bundle(short_bundle, tmp_path / "b")
    back = rc.load_bundle(tmp_path / "b")
    assert back.recording_id == short_bundle.recording_id
    assert back.annotations == short_bundle.annotations
    assert back.hypnogram == short_bundle.hypnogram
    np.testing.assert_allclose(back.respiration.samples, short_bundle.respiration.samples, atol=1e-5)
    np.testing.assert_allclose(back.spo2.samples, short_bundle.spo2.samples, atol=1e-3)
    assert rc.find_bundles(tmp_path) == [tmp_path / "b"]


def test_missing_hypnogram_assumes_sleep(tmp_path, short_bundle):
    d = rc.save_bundle(short_bundle, tmp_path / "b")
    (d / "hypnogram.csv").unlink()
    b = rc.load_bundle(d)
    assert b.hypnogram.assumed
    assert all(s.is_sleep for s in b.hypnogram.stages)


def test_load_errors_name_file_and_line(tmp_path, short_bundle):
    d = rc.save_bundle(short_bundle, tmp_path / "b")
    lines = (d / "respiration.csv").read_text().splitlines()
    lines[5] = "oops,1.0"
    (d / "respiration.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(LoadError, match=r"respiration.csv:6"):
        rc.load_bundle(d)
    (d / "meta.json").write_text("{}")
    with pytest.raises(LoadError, match="subject_id"):
        rc.load_bundle(d)


def test_annotation_validation(tmp_path):
    p = tmp_path / "a.json"
    p.write_text(json.dumps([{"start_s": 1, "duration_s": 5, "kind": "snore"}]))
    with pytest.raises(LoadError, match="unknown kind"):
        rc.read_annotations(p)
    p.write_text(json.dumps([{"start_s": 1, "duration_s": -5, "kind": "hypopnea"}]))
    with pytest.raises(LoadError):
        rc.read_annotations(p)


def test_gap_filling(tmp_path):
    t = np.arange(0, 20, 0.1)
    v = np.sin(t)
    v[50:60] = np.nan  # 1 s gap: interpolated
    write_csv(tmp_path / "s.csv", t, v)
    tr = rc.load_trace(tmp_path / "s.csv", 10.0)
    assert np.all(np.isfinite(tr.samples))
    v[50:90] = np.nan  # 4 s gap: rejected
    write_csv(tmp_path / "s.csv", t, v)
    with pytest.raises(DataError, match="exceeds"):
        rc.load_trace(tmp_path / "s.csv", 10.0)


def test_non_monotone_timestamps(tmp_path):
    write_csv(tmp_path / "s.csv", [0.0, 0.2, 0.1], [1, 2, 3])
    with pytest.raises(LoadError, match="increase"):
        rc.read_signal_csv(tmp_path / "s.csv")


def test_resample_onto_grid():
    t = np.array([0.0, 0.5, 1.0, 2.0])
    tr = rc.resample(t, t * 2, 4.0)
    np.testing.assert_allclose(tr.samples, np.arange(9) / 4.0 * 2)


@given(st.lists(st.floats(-50, 50), min_size=100, max_size=300), st.floats(0.5, 20), st.floats(-100, 100))
@settings(max_examples=50, deadline=None)
def test_normalization_is_affine_invariant(xs, scale, shift):
    x = np.asarray(xs)
    if np.ptp(x) < 1e-3 or rc.clipped_moments(x)[1] < 1e-6:
        return
    a = rc.normalize_respiration(rc.SignalTrace(x, 10.0)).samples
    b = rc.normalize_respiration(rc.SignalTrace(x * scale + shift, 10.0)).samples
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_normalization_rejects_flat():
    with pytest.raises(DegenerateSignal):
        rc.normalize_respiration(rc.SignalTrace(np.ones(200), 10.0))


def test_centered_mean_bruteforce():
    rng = np.random.default_rng(0)
    x = rng.normal(size=50)
    for w in (1, 2, 5, 12):
        got = rc.centered_mean(x, w)
        for i in range(x.size):
            lo, hi = max(0, i - (w - 1) // 2), min(x.size, i + w // 2 + 1)
            assert got[i] == pytest.approx(x[lo:hi].mean())


def test_slice_and_stage_lookup():
    tr = rc.SignalTrace(np.arange(100.0), 10.0, 5.0)
    s = tr.slice(6.0, 7.0)
    assert s.start_offset_s == pytest.approx(6.0) and len(s) == 10
    with pytest.raises(EmptySlice):
        tr.slice(50.0, 60.0)
    hyp = rc.Hypnogram((rc.Stage.WAKE, rc.Stage.N2))
    assert rc.stage_at(hyp, 29.9) is rc.Stage.WAKE
    assert rc.stage_at(hyp, 30.0) is rc.Stage.N2
    assert rc.stage_at(hyp, 61.0) is rc.Stage.UNKNOWN
    assert hyp.stage_seconds(20.0, 40.0) == pytest.approx(10.0)


def test_annotations_trimmed_to_span():
    tr = rc.SignalTrace(np.random.default_rng(0).normal(size=2000), 10.0)
    events = (rc.EventAnnotation(190.0, 20.0, "hypopnea"), rc.EventAnnotation(300.0, 10.0, "hypopnea"))
    b = rc.RecordingBundle("s", "r", tr, rc.Hypnogram.all_sleep(200.0), events)
    assert b.annotations == (rc.EventAnnotation(190.0, 10.0, "hypopnea"),)


def test_rasterize():
    e = [rc.EventAnnotation(2.5, 2.0, "hypopnea")]
    np.testing.assert_array_equal(rc.rasterize(e, 6), [0, 0, 0, 1, 1, 0])
