"""Synthetic overnight recordings with injected, annotated respiratory events."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .recording import (
    AIRFLOW_HZ,
    RESPIRATION_HZ,
    SPO2_HZ,
    EventAnnotation,
    EventKind,
    Hypnogram,
    RecordingBundle,
    SignalTrace,
    Stage,
    atomic_write_text,
    event_list,
    save_bundle,
)

logger = logging.getLogger(__name__)

EVENT_MIX = (
    (EventKind.OBSTRUCTIVE_APNEA, 0.30),
    (EventKind.CENTRAL_APNEA, 0.10),
    (EventKind.MIXED_APNEA, 0.05),
    (EventKind.HYPOPNEA, 0.55),
)
# Airflow amplitude during events (what a nasal sensor sees).
APNEA_SCALE = 0.05
HYPOPNEA_SCALE = 0.4
# Effort-belt amplitude ranges: obstructive events keep breathing against
# the closed airway, so the belt barely changes; central events go flat.
EFFORT_SCALE = {
    EventKind.OBSTRUCTIVE_APNEA: (0.55, 0.95),
    EventKind.CENTRAL_APNEA: (0.0, 0.15),
    EventKind.MIXED_APNEA: (0.2, 0.5),
    EventKind.HYPOPNEA: (0.5, 0.85),
}
RECOVERY_GAIN = (0.1, 0.5)  # extra amplitude of the post-event breaths
DECOY_EFFORT = (0.5, 0.85)  # unscored shallow breathing, no desaturation
DECOY_AIRFLOW = (0.7, 0.9)


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 20
    nights_per_subject: int = 2
    hours: float = 8.0
    ahi_low: float = 2.0  # per-night event rate drawn uniformly from [low, high]
    ahi_high: float = 45.0
    wake_fraction: float = 0.10
    min_event_s: float = 10.0
    max_event_s: float = 30.0
    min_gap_s: float = 20.0
    desat_low_pct: float = 3.0
    desat_high_pct: float = 6.0
    lag_low_s: float = 10.0
    lag_high_s: float = 20.0
    arousal_prob: float = 0.3
    spo2_noise_pct: float = 0.15
    decoy_rate_per_h: float = 8.0  # unscored shallow-breathing stretches per sleep hour
    with_airflow: bool = True
    with_spo2: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.nights_per_subject < 1:
            raise ValueError("need at least one subject and one night")
        if not (0 <= self.ahi_low <= self.ahi_high):
            raise ValueError("ahi range must satisfy 0 <= low <= high")
        if not 0 <= self.wake_fraction < 1:
            raise ValueError("wake_fraction must be in [0, 1)")
        if not 0 < self.min_event_s <= self.max_event_s:
            raise ValueError("event durations must satisfy 0 < min <= max")
        if self.hours * 3600 < 600:
            raise ValueError("recordings must be at least 10 minutes long")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SynthRecord:
    """What was injected into one night (the generator's count log)."""

    subject_id: str
    recording_id: str
    rate_per_h: float
    sleep_hours: float
    n_events: int
    n_requested: int
    injected_ahi: float
    n_hypopnea: int
    n_hypopnea_desat4: int  # injected depth >= 4 %
    n_arousal: int


def _smooth_noise(rng: np.random.Generator, n: int, rate_hz: float, knot_s: float) -> np.ndarray:
    """Zero-mean unit-ish noise, linearly interpolated between knots every ``knot_s``."""
    n_knots = int(math.ceil(n / rate_hz / knot_s)) + 2
    knots = rng.standard_normal(n_knots)
    return np.interp(np.arange(n) / rate_hz / knot_s, np.arange(n_knots), knots)


def make_hypnogram(rng: np.random.Generator, n_epochs: int, wake_fraction: float) -> Hypnogram:
    """Sleep-onset wake, a few awakenings, and ~90 min NREM/REM cycles."""
    n_wake = int(round(wake_fraction * n_epochs))
    wake = np.zeros(n_epochs, dtype=bool)
    onset = min(n_wake, max(1, int(round(0.4 * n_wake)))) if n_wake else 0
    wake[:onset] = True
    remaining = n_wake - onset
    n_bouts = min(remaining, int(rng.integers(3, 7))) if remaining else 0
    if n_bouts:
        sizes = np.full(n_bouts, remaining // n_bouts)
        sizes[: remaining % n_bouts] += 1
        for size in sizes:
            for _ in range(100):
                s = int(rng.integers(onset + 1, max(onset + 2, n_epochs - size)))
                if not wake[max(0, s - 1) : s + size + 1].any():
                    wake[s : s + size] = True
                    break
    stages = []
    cycle = int(rng.integers(170, 200))  # epochs per cycle
    for k in range(n_epochs):
        if wake[k]:
            stages.append(Stage.WAKE)
            continue
        phase = (k % cycle) / cycle
        early = k < n_epochs / 2
        if phase < 0.05:
            stages.append(Stage.N1)
        elif phase < (0.45 if early else 0.65):
            stages.append(Stage.N2)
        elif phase < 0.75:
            stages.append(Stage.N3 if early else Stage.N2)
        else:
            stages.append(Stage.REM)
    return Hypnogram(tuple(stages))


def place_events(
    rng: np.random.Generator, sleep: np.ndarray, n_events: int, spec: SynthSpec
) -> list[tuple[float, float]]:
    """Random sequential placement inside sleep with a minimum gap.

    ``sleep`` is a per-second mask. Events that cannot be placed after a
    bounded number of tries are dropped (and reported by the caller).
    """
    free = sleep.copy()
    n = sleep.size
    gap = int(math.ceil(spec.min_gap_s))
    placed = []
    for _ in range(n_events):
        d = float(rng.uniform(spec.min_event_s, spec.max_event_s))
        di = int(math.ceil(d))
        for _ in range(200):
            s = int(rng.integers(gap, n - di - gap))
            if free[s - gap : s + di + gap].all():
                free[s - gap : s + di + gap] = False
                placed.append((float(s), round(d, 1)))
                break
    placed.sort()
    return placed


def _event_envelope(n: int, rate: float, events, scales, recovery) -> np.ndarray:
    """Multiplicative amplitude envelope: suppression with 1 s ramps, then recovery breaths."""
    env = np.ones(n)
    t = np.arange(n) / rate
    for (s, d), f, g in zip(events, scales, recovery):
        e = s + d
        lo, hi = int(s * rate), min(n, int(math.ceil((e + 10.0) * rate)))
        tt = t[lo:hi]
        ramp_in = np.clip((tt - s) / 1.0, 0.0, 1.0)
        ramp_out = np.clip((e - tt) / 1.0, 0.0, 1.0)
        inside = np.minimum(ramp_in, ramp_out)
        seg = 1.0 - (1.0 - f) * inside
        rec = (tt >= e) & (tt < e + 10.0)
        seg[rec] = 1.0 + g * (1.0 - (tt[rec] - e) / 10.0)
        env[lo:hi] = seg  # placement gaps exceed the recovery span, so no overlap
    return env


def _breathing(rng, n, rate, f0, phase_jitter, amp_drift):
    freq = f0 * (1.0 + 0.08 * phase_jitter)
    phase = 2 * np.pi * np.cumsum(freq) / rate + rng.uniform(0, 2 * np.pi)
    return (1.0 + 0.15 * amp_drift) * (np.sin(phase) + 0.2 * np.sin(2 * phase + 0.7))


def synth_recording(
    spec: SynthSpec, subject_idx: int, night: int, subject_rng_seed: int, night_seed: int
) -> tuple[RecordingBundle, SynthRecord]:
    subj_rng = np.random.default_rng(subject_rng_seed)
    f0 = float(subj_rng.uniform(0.2, 0.3))
    gain = float(subj_rng.uniform(50.0, 150.0))
    offset = float(subj_rng.uniform(-200.0, 800.0))
    noise = float(subj_rng.uniform(0.03, 0.08))

    rng = np.random.default_rng(night_seed)
    total_s = int(round(spec.hours * 3600))
    n_epochs = int(math.ceil(total_s / 30))
    hyp = make_hypnogram(rng, n_epochs, spec.wake_fraction)
    sleep_mask = hyp.sleep_mask(total_s)
    rate = float(rng.uniform(spec.ahi_low, spec.ahi_high))
    n_requested = int(rng.poisson(rate * hyp.sleep_hours))
    n_decoys = int(rng.poisson(spec.decoy_rate_per_h * hyp.sleep_hours))
    placed = place_events(rng, sleep_mask, n_requested + n_decoys, spec)
    decoy = np.zeros(len(placed), dtype=bool)
    decoy[rng.permutation(len(placed))[: min(n_decoys, max(0, len(placed) - n_requested))]] = True
    intervals = [iv for iv, dec in zip(placed, decoy) if not dec]
    decoys = [iv for iv, dec in zip(placed, decoy) if dec]
    if len(intervals) < n_requested:
        logger.warning("subject %d night %d: placed %d of %d events", subject_idx, night, len(intervals), n_requested)
    kinds = [k for k, _ in EVENT_MIX]
    probs = np.array([p for _, p in EVENT_MIX])
    picks = rng.choice(len(kinds), size=len(intervals), p=probs / probs.sum())
    ev_kinds = [kinds[i] for i in picks]
    effort = [float(rng.uniform(*EFFORT_SCALE[k])) for k in ev_kinds] + [
        float(rng.uniform(*DECOY_EFFORT)) for _ in decoys
    ]
    flow = [HYPOPNEA_SCALE if k is EventKind.HYPOPNEA else APNEA_SCALE for k in ev_kinds] + [
        float(rng.uniform(*DECOY_AIRFLOW)) for _ in decoys
    ]
    recovery = [float(rng.uniform(*RECOVERY_GAIN)) for _ in ev_kinds] + [
        float(rng.uniform(0.0, RECOVERY_GAIN[0])) for _ in decoys
    ]
    all_iv = intervals + decoys

    n_resp = int(total_s * RESPIRATION_HZ)
    jitter = _smooth_noise(rng, n_resp, RESPIRATION_HZ, 30.0)
    drift = _smooth_noise(rng, n_resp, RESPIRATION_HZ, 120.0)
    breath = _breathing(rng, n_resp, RESPIRATION_HZ, f0, jitter, drift)
    env = _event_envelope(n_resp, RESPIRATION_HZ, all_iv, effort, recovery)
    wander = 0.1 * _smooth_noise(rng, n_resp, RESPIRATION_HZ, 60.0)
    resp = gain * (breath * env + wander + noise * rng.standard_normal(n_resp)) + offset
    respiration = SignalTrace(np.round(resp, 5), RESPIRATION_HZ)

    airflow = None
    if spec.with_airflow:
        n_air = int(total_s * AIRFLOW_HZ)
        air_env = _event_envelope(n_air, AIRFLOW_HZ, all_iv, flow, recovery)
        air = breath[:n_air] * air_env + 0.03 * rng.standard_normal(n_air)
        airflow = SignalTrace(np.round(air, 5), AIRFLOW_HZ)

    depths = rng.uniform(spec.desat_low_pct, spec.desat_high_pct, size=len(intervals))
    lags = rng.uniform(spec.lag_low_s, spec.lag_high_s, size=len(intervals))
    spo2 = None
    if spec.with_spo2:
        n_sp = int(total_s * SPO2_HZ)
        t = np.arange(n_sp) / SPO2_HZ
        deficit = np.zeros(n_sp)
        for (s, d), depth, lag in zip(intervals, depths, lags):
            onset, nadir = s + lag, s + d + lag
            fall = np.clip((t - onset) / (nadir - onset), 0.0, 1.0)
            rise = np.clip(1.0 - (t - nadir) / 12.0, 0.0, 1.0)
            deficit = np.maximum(deficit, depth * np.where(t <= nadir, fall, rise))
        base = 97.0 + 0.3 * _smooth_noise(rng, n_sp, SPO2_HZ, 300.0)
        sp = base - deficit + spec.spo2_noise_pct * rng.standard_normal(n_sp)
        spo2 = SignalTrace(np.round(np.clip(sp, 50.0, 100.0), 3), SPO2_HZ)

    events = [EventAnnotation(s, d, k) for (s, d), k in zip(intervals, ev_kinds)]
    n_arousal = 0
    for s, d in intervals:
        if rng.random() < spec.arousal_prob:
            a0 = round(s + d + float(rng.uniform(0.0, 3.0)), 1)
            if a0 + 3.0 < total_s:
                events.append(EventAnnotation(a0, round(float(rng.uniform(3.0, 10.0)), 1), EventKind.AROUSAL))
                n_arousal += 1

    subject_id = f"S{subject_idx:03d}"
    recording_id = f"{subject_id}_N{night + 1}"
    bundle = RecordingBundle(
        subject_id=subject_id,
        recording_id=recording_id,
        respiration=respiration,
        hypnogram=hyp,
        annotations=event_list(events),
        spo2=spo2,
        airflow=airflow,
        notes="synthetic",
    )
    n_resp_events = len(intervals)
    record = SynthRecord(
        subject_id,
        recording_id,
        float(rate),
        float(hyp.sleep_hours),
        int(n_resp_events),
        int(n_requested),
        n_resp_events / hyp.sleep_hours if hyp.sleep_hours else 0.0,
        int(sum(k is EventKind.HYPOPNEA for k in ev_kinds)),
        int(sum(k is EventKind.HYPOPNEA and dp >= 4.0 for k, dp in zip(ev_kinds, depths))),
        int(n_arousal),
    )
    return bundle, record


def iter_cohort(spec: SynthSpec):
    """Yield (bundle, record) per night; each night has its own seeded stream."""
    root = np.random.SeedSequence(spec.seed)
    subj_seqs = root.spawn(spec.n_subjects)
    for i, ss in enumerate(subj_seqs):
        subj_seed, *night_seeds = ss.spawn(1 + spec.nights_per_subject)
        for night, ns in enumerate(night_seeds):
            yield synth_recording(
                spec, i, night, int(subj_seed.generate_state(1)[0]), int(ns.generate_state(1)[0])
            )


def write_cohort(spec: SynthSpec, out_dir: Path) -> list[SynthRecord]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for bundle, rec in iter_cohort(spec):
        save_bundle(bundle, out / bundle.recording_id)
        records.append(rec)
        logger.info("wrote %s (%d events, AHI %.1f)", rec.recording_id, rec.n_events, rec.injected_ahi)
    manifest = {"spec": asdict(spec), "recordings": [asdict(r) for r in records]}
    atomic_write_text(out / "synth_manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return records


# -- planted-feature matrices for selection checks ------------------------------


def planted_matrix(
    n_subjects: int = 20,
    rows_per_subject: int = 300,
    n_informative: int = 5,
    n_noise: int = 45,
    effect: float = 0.9,
    pos_rate: float = 0.3,
    seed: int = 0,
):
    """Rows grouped by subject; the first ``n_informative`` columns shift with the label.

    Informative columns are named ``inf_<k>`` and noise columns ``noise_<k>``;
    the column order is interleaved so informative features do not win
    registry-order ties by position.
    """
    from .featurize import FeatureMatrix

    rng = np.random.default_rng(seed)
    n = n_subjects * rows_per_subject
    y = (rng.random(n) < pos_rate).astype(np.int8)
    effects = effect * np.linspace(0.8, 1.2, n_informative)
    inf = rng.normal(size=(n, n_informative)) + y[:, None] * effects
    noise = rng.normal(size=(n, n_noise))
    names = [f"inf_{k}" for k in range(n_informative)] + [f"noise_{k:02d}" for k in range(n_noise)]
    values = np.hstack([inf, noise])
    order = rng.permutation(len(names))
    groups = np.repeat([f"P{s:03d}" for s in range(n_subjects)], rows_per_subject).astype(object)
    starts = np.tile(np.arange(rows_per_subject, dtype=np.int64), n_subjects)
    return FeatureMatrix(values[:, order], tuple(names[j] for j in order), y, groups, starts, np.zeros(n, dtype=bool))
