from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apnea_kit import featurize as fz
from apnea_kit.errors import DegenerateInput, DimensionMismatch, MissingSignal
from apnea_kit.recording import SignalTrace, moving_average, normalize_respiration
from oracles import katz_brute, sampen_brute, ventilation_brute

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_sampen_matches_bruteforce_random():
    rng = np.random.default_rng(0)
    for k in range(120):
        n = int(rng.integers(8, 80))
        x = rng.normal(size=n)
        if k % 3 == 0:
            x = np.round(x * 2) / 2  # many exact ties at the tolerance edge
        if x.std() == 0:
            continue
        assert fz.sample_entropy(x) == pytest.approx(sampen_brute(x), rel=1e-9, abs=1e-12)


def test_sampen_constant_sequence_is_zero():
    assert fz.sample_entropy(np.ones(30), r=0.1) == 0.0


def test_sampen_alternating_example():
    x = [1, 2, 1, 2, 1, 2, 1, 2]
    assert fz.sample_entropy(x, 2, 0.5) == pytest.approx(sampen_brute(x, 2, 0.5), rel=1e-12)


def test_sampen_regular_signal_is_low():
    t = np.arange(400)
    regular = fz.sample_entropy(np.sin(2 * np.pi * t / 25))
    noisy = fz.sample_entropy(np.random.default_rng(1).normal(size=400))
    assert regular < noisy


def test_sampen_rejects_flat_and_short():
    with pytest.raises(DegenerateInput):
        fz.sample_entropy(np.ones(50))
    with pytest.raises(DegenerateInput):
        fz.sample_entropy([1.0, 2.0, 3.0])


@given(st.lists(finite, min_size=2, max_size=60))
@settings(max_examples=150, deadline=None)
def test_katz_matches_bruteforce_and_is_at_least_one(xs):
    got = fz.katz_fd(xs)
    assert got == pytest.approx(katz_brute(xs), rel=1e-9, abs=1e-12)
    assert got >= 1.0


def test_katz_straight_line_is_one():
    assert fz.katz_fd(np.arange(30.0)) == pytest.approx(1.0)


@given(st.lists(finite, min_size=2, max_size=80), finite)
@settings(max_examples=150, deadline=None)
def test_ventilation_oracle_and_shift_invariance(xs, c):
    v = fz.ventilation(xs)
    assert v == pytest.approx(ventilation_brute(xs), rel=1e-9, abs=1e-9)
    assert v >= 0
    assert fz.ventilation(np.asarray(xs) + c) == pytest.approx(v, rel=1e-6, abs=1e-6)


def test_registry_shape_and_names():
    resp = fz.build_registry()
    names = fz.registry_names(resp)
    assert len(names) == len(set(names)) == 214
    assert len(fz.build_registry(include_spo2=True)) == 215
    assert fz.build_registry(include_spo2=True, robust=True)[-1].family is fz.Family.SPO2_DROP_ROBUST
    for spec in resp:
        assert fz.parse_feature_name(spec.name) == spec
        if spec.position_s is not None:
            assert spec.width_s <= spec.position_s
    assert fz.registry_hash(names) == fz.registry_hash(list(names))
    assert fz.registry_hash(names) != fz.registry_hash(names[::-1])
    with pytest.raises(DimensionMismatch):
        fz.parse_feature_name("planted_3")


def test_bank_matches_scalar_kernels(short_bundle):
    registry = fz.build_registry(include_spo2=True)
    bank = fz.build_bank(short_bundle, registry)
    rows = np.array([0, 7, bank.n_windows // 2, bank.n_windows - 1])
    fm = fz.gather(bank, registry, rows)
    resp = normalize_respiration(short_bundle.respiration)
    smooth = moving_average(resp, fz.SMOOTH_WIDTH_S)
    rate = resp.rate_hz
    for r, start in enumerate(fm.window_starts):
        for j, spec in enumerate(registry):
            if spec.position_s is None:
                continue  # long-reference and SpO2 families are checked separately
            src = smooth if spec.source is fz.Source.SMOOTHED else resp
            end = int(round((start + spec.position_s - resp.start_offset_s) * rate))
            seg = src.samples[end - int(round(spec.width_s * rate)) : end]
            expect = {
                fz.Family.STD: lambda s: float(np.std(s)),
                fz.Family.VENTILATION: fz.ventilation,
                fz.Family.SAMPLE_ENTROPY: fz.sample_entropy,
                fz.Family.KATZ_FD: fz.katz_fd,
            }[spec.family](seg)
            assert fm.values[r, j] == pytest.approx(expect, rel=1e-9, abs=1e-12), spec.name
        drop = fz.spo2_drop(short_bundle.spo2, start + fz.ANCHOR_S)
        assert fm.values[r, -1] == pytest.approx(drop)


def test_robust_drop_is_max_over_lags(short_bundle):
    spo2 = short_bundle.spo2
    for t in (200.0, 500.0, 800.0):
        plain = [fz.spo2_drop(spo2, t + lag) for lag in fz.lag_grid()]
        assert fz.spo2_drop_robust(spo2, t) == pytest.approx(max(plain))
        assert fz.spo2_drop_robust(spo2, t) >= fz.spo2_drop(spo2, t)


def test_spo2_drop_definition():
    v = np.full(200, 97.0)
    v[100:130] = 92.0
    spo2 = SignalTrace(v, 1.0)
    assert fz.spo2_drop(spo2, 95.0) == pytest.approx(5.0)
    assert fz.spo2_drop(spo2, 20.0) == 0.0
    with pytest.raises(MissingSignal):
        fz.spo2_drop(None, 10.0)


def test_windows_and_labels(short_bundle):
    registry = fz.build_registry()[:3]
    fm = fz.extract_windows(short_bundle, registry)
    assert np.all(np.diff(fm.window_starts) == 1)
    assert fm.window_starts[-1] + fz.WINDOW_S <= short_bundle.respiration.end_s
    anchors = fm.window_starts + fz.ANCHOR_S
    inside = np.zeros(anchors.size, dtype=bool)
    for e in short_bundle.respiratory_events():
        inside |= (anchors >= e.start_s) & (anchors < e.end_s)
    np.testing.assert_array_equal(fm.labels.astype(bool), inside)


def test_matrix_roundtrip(tmp_path, short_bundle):
    fm = fz.extract_windows(short_bundle, fz.build_registry()[:5], step_s=30)
    fz.save_matrix(fm, tmp_path)
    back = fz.load_matrix(tmp_path)
    np.testing.assert_array_equal(back.values, fm.values)
    np.testing.assert_array_equal(back.labels, fm.labels)
    assert back.names == fm.names
