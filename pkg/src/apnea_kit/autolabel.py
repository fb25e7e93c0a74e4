"""Rule-based hypopnea scoring from PSG airflow, SpO2 and arousal annotations."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import median_filter

from .errors import DegenerateInput, MissingSignal, ZeroSleep
from .featurize import SPO2_HORIZON_S, spo2_drop
from .metrics import overlap_with_union, merge_intervals
from .recording import EventAnnotation, EventKind, Hypnogram, RecordingBundle, SignalTrace, event_list

logger = logging.getLogger(__name__)

ENVELOPE_BLOCK_S = 2.0
BASELINE_S = 100.0
MIN_AIRFLOW_S = 300.0
DEFAULT_DROP = 0.5
DEFAULT_MIN_DURATION_S = 10.0
AROUSAL_GRACE_S = 5.0


class RuleName(str, enum.Enum):
    RULE3 = "Rule3"
    RULE4 = "Rule4"


@dataclass(frozen=True)
class HypopneaRule:
    name: RuleName
    desat_threshold_pct: float
    arousal_allowed: bool

    def __post_init__(self):
        expected = {RuleName.RULE3: (3.0, True), RuleName.RULE4: (4.0, False)}[RuleName(self.name)]
        if (self.desat_threshold_pct, self.arousal_allowed) != expected:
            raise ValueError(f"{self.name} must be {expected}")

    @classmethod
    def of(cls, pct: int) -> "HypopneaRule":
        return RULE3 if pct == 3 else RULE4 if pct == 4 else _bad_rule(pct)


def _bad_rule(pct):
    raise ValueError(f"no hypopnea rule for {pct}%")


RULE3 = HypopneaRule(RuleName.RULE3, 3.0, True)
RULE4 = HypopneaRule(RuleName.RULE4, 4.0, False)


@dataclass(frozen=True)
class CandidateEvent:
    start_s: float
    duration_s: float
    airflow_drop_fraction: float

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s


def breath_envelope(airflow: SignalTrace, block_s: float = ENVELOPE_BLOCK_S) -> np.ndarray:
    """Peak-to-trough amplitude per block, 3-point median filtered."""
    per = int(round(block_s * airflow.rate_hz))
    n_blocks = airflow.samples.size // per
    blocks = airflow.samples[: n_blocks * per].reshape(n_blocks, per)
    amp = blocks.max(axis=1) - blocks.min(axis=1)
    return median_filter(amp, size=3, mode="nearest")


def trailing_median(env: np.ndarray, n_back: int) -> np.ndarray:
    """Median of the preceding ``n_back`` blocks; the first block uses the opening stretch."""
    out = np.empty_like(env)
    out[0] = np.median(env[:n_back])
    for k in range(1, env.size):
        out[k] = np.median(env[max(0, k - n_back) : k])
    return out


def detect_airflow_decreases(
    airflow: SignalTrace | None,
    drop_fraction: float = DEFAULT_DROP,
    min_duration_s: float = DEFAULT_MIN_DURATION_S,
) -> list[CandidateEvent]:
    """Stretches where the breath envelope stays below (1 - drop) x baseline."""
    if airflow is None:
        raise MissingSignal("hypopnea scoring needs an airflow trace")
    if airflow.duration_s < MIN_AIRFLOW_S:
        raise DegenerateInput(f"airflow is {airflow.duration_s:.0f} s, needs >= {MIN_AIRFLOW_S:.0f} s")
    if not 0 < drop_fraction < 1:
        raise ValueError("drop_fraction must be in (0, 1)")
    env = breath_envelope(airflow)
    base = trailing_median(env, int(round(BASELINE_S / ENVELOPE_BLOCK_S)))
    low = env < (1.0 - drop_fraction) * base
    edges = np.diff(np.r_[0, low.astype(np.int8), 0])
    starts, stops = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    out = []
    for a, b in zip(starts, stops):
        start = airflow.start_offset_s + a * ENVELOPE_BLOCK_S
        dur = (b - a) * ENVELOPE_BLOCK_S
        if dur < min_duration_s:
            continue
        ref = float(np.median(base[a:b]))
        frac = 1.0 - float(np.median(env[a:b])) / ref if ref > 0 else 0.0
        out.append(CandidateEvent(start, dur, min(1.0, max(0.0, frac))))
    return out


def desaturation_satisfied(spo2: SignalTrace | None, event: CandidateEvent, threshold_pct: float) -> bool:
    return spo2_drop(spo2, event.end_s, SPO2_HORIZON_S) >= threshold_pct


def arousal_associated(
    annotations: Sequence[EventAnnotation], event: CandidateEvent, grace_s: float = AROUSAL_GRACE_S
) -> bool:
    return any(
        a.kind is EventKind.AROUSAL and event.start_s <= a.start_s <= event.end_s + grace_s for a in annotations
    )


def relabel(
    bundle: RecordingBundle,
    rule: HypopneaRule,
    drop_fraction: float = DEFAULT_DROP,
    min_duration_s: float = DEFAULT_MIN_DURATION_S,
    grace_s: float = AROUSAL_GRACE_S,
) -> tuple[EventAnnotation, ...]:
    """Expert apneas plus auto-scored hypopneas under ``rule``."""
    if bundle.spo2 is None:
        raise MissingSignal(f"{bundle.recording_id}: hypopnea scoring needs SpO2")
    apneas = [e for e in bundle.annotations if e.kind.is_apnea]
    apnea_union = merge_intervals((e.start_s, e.end_s) for e in apneas)
    hypopneas = []
    for c in detect_airflow_decreases(bundle.airflow, drop_fraction, min_duration_s):
        if overlap_with_union(c.start_s, c.end_s, apnea_union) >= 0.5 * c.duration_s:
            continue
        if desaturation_satisfied(bundle.spo2, c, rule.desat_threshold_pct) or (
            rule.arousal_allowed and arousal_associated(bundle.annotations, c, grace_s)
        ):
            hypopneas.append(EventAnnotation(c.start_s, c.duration_s, EventKind.HYPOPNEA))
    return event_list(apneas + hypopneas)


def hypopnea_index(events: Sequence[EventAnnotation], hypnogram: Hypnogram) -> float:
    hours = hypnogram.sleep_hours
    if hours <= 0:
        raise ZeroSleep("no sleep epochs in hypnogram")
    return sum(e.kind is EventKind.HYPOPNEA for e in events) / hours
