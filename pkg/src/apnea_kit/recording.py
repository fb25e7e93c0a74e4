"""Recording data model, bundle I/O and signal-level preprocessing.

All times are seconds relative to the bundle epoch. Traces are resampled to
canonical rates when loaded from disk, so window geometry downstream is a pure
function of seconds.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, DegenerateInput, DegenerateSignal, EmptySlice, LoadError

logger = logging.getLogger(__name__)

RESPIRATION_HZ = 10.0
AIRFLOW_HZ = 10.0
SPO2_HZ = 1.0
MAX_GAP_S = 2.0
MIN_COMMON_SPAN_S = 90.0


class EventKind(str, enum.Enum):
    OBSTRUCTIVE_APNEA = "obstructive_apnea"
    CENTRAL_APNEA = "central_apnea"
    MIXED_APNEA = "mixed_apnea"
    HYPOPNEA = "hypopnea"
    AROUSAL = "arousal"
    PREDICTED = "predicted"

    @property
    def is_apnea(self) -> bool:
        return self in (EventKind.OBSTRUCTIVE_APNEA, EventKind.CENTRAL_APNEA, EventKind.MIXED_APNEA)

    @property
    def is_respiratory(self) -> bool:
        """Counts toward the AHI and the window labels."""
        return self.is_apnea or self is EventKind.HYPOPNEA


ANNOTATION_KINDS = frozenset(k.value for k in EventKind if k is not EventKind.PREDICTED)


class Stage(str, enum.Enum):
    WAKE = "W"
    N1 = "N1"
    N2 = "N2"
    N3 = "N3"
    REM = "R"
    UNKNOWN = "?"

    @property
    def is_sleep(self) -> bool:
        return self not in (Stage.WAKE, Stage.UNKNOWN)


@dataclass(frozen=True, eq=False)
class SignalTrace:
    """Uniformly sampled real-valued signal."""

    samples: np.ndarray
    rate_hz: float
    start_offset_s: float = 0.0

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size < 1:
            raise DegenerateInput("trace needs at least one sample")
        if not (self.rate_hz > 0 and math.isfinite(self.rate_hz)):
            raise DegenerateInput(f"rate_hz must be positive, got {self.rate_hz}")
        if self.start_offset_s < 0:
            raise DegenerateInput("start_offset_s must be >= 0")
        if not np.all(np.isfinite(x)):
            raise DegenerateSignal("trace contains non-finite samples")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.rate_hz

    @property
    def end_s(self) -> float:
        return self.start_offset_s + self.duration_s

    def times(self) -> np.ndarray:
        return self.start_offset_s + np.arange(self.samples.size) / self.rate_hz

    def index_at(self, t_s: float) -> int:
        """Sample index whose interval contains ``t_s`` (rounded to the grid)."""
        return int(round((t_s - self.start_offset_s) * self.rate_hz))

    def with_samples(self, samples: np.ndarray) -> "SignalTrace":
        return SignalTrace(samples, self.rate_hz, self.start_offset_s)

    def shifted(self, delta_s: float) -> "SignalTrace":
        return SignalTrace(self.samples, self.rate_hz, self.start_offset_s + delta_s)

    def slice(self, t0_s: float, t1_s: float) -> "SignalTrace":
        return slice_trace(self, t0_s, t1_s)


@dataclass(frozen=True, order=True)
class EventAnnotation:
    start_s: float
    duration_s: float
    kind: EventKind = field(compare=True)

    def __post_init__(self):
        if not self.duration_s > 0:
            raise DataError(f"event duration must be > 0, got {self.duration_s}")
        if self.start_s < 0:
            raise DataError(f"event start must be >= 0, got {self.start_s}")
        object.__setattr__(self, "kind", EventKind(self.kind))

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s

    def to_json(self) -> dict:
        return {"start_s": self.start_s, "duration_s": self.duration_s, "kind": self.kind.value}


EventList = tuple  # tuple[EventAnnotation, ...], kept sorted


def event_list(events: Iterable[EventAnnotation]) -> tuple[EventAnnotation, ...]:
    return tuple(sorted(events, key=lambda e: (e.start_s, e.duration_s, e.kind.value)))


@dataclass(frozen=True)
class Hypnogram:
    stages: tuple[Stage, ...]
    epoch_s: float = 30.0
    assumed: bool = False  # True when no staging was available

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(Stage(s) for s in self.stages))

    @classmethod
    def all_sleep(cls, duration_s: float, epoch_s: float = 30.0) -> "Hypnogram":
        n = max(1, int(math.ceil(duration_s / epoch_s)))
        return cls((Stage.N2,) * n, epoch_s, assumed=True)

    @property
    def sleep_hours(self) -> float:
        return self.epoch_s * sum(s.is_sleep for s in self.stages) / 3600.0

    def stage_codes(self) -> np.ndarray:
        order = list(Stage)
        return np.array([order.index(s) for s in self.stages], dtype=np.int8)

    def stage_seconds(self, start_s: float, end_s: float, stage: Stage = Stage.WAKE) -> float:
        """Seconds of ``[start_s, end_s)`` that fall in epochs of ``stage``."""
        total = 0.0
        if end_s <= start_s:
            return 0.0
        first = int(start_s // self.epoch_s)
        last = int(math.ceil(end_s / self.epoch_s))
        for k in range(max(first, 0), last):
            s = self.stages[k] if k < len(self.stages) else Stage.UNKNOWN
            if s is stage:
                lo = max(start_s, k * self.epoch_s)
                hi = min(end_s, (k + 1) * self.epoch_s)
                total += max(0.0, hi - lo)
        return total

    def sleep_mask(self, n_seconds: int, start_s: float = 0.0) -> np.ndarray:
        """Boolean per-second mask (second ``start_s + i``) of sleep epochs."""
        t = start_s + np.arange(n_seconds)
        idx = np.floor(t / self.epoch_s).astype(np.int64)
        sleep = np.array([s.is_sleep for s in self.stages] + [False])
        idx = np.where((idx >= 0) & (idx < len(self.stages)), idx, len(self.stages))
        return sleep[idx]


def stage_at(hypnogram: Hypnogram, t_s: float) -> Stage:
    if t_s < 0:
        raise ValueError("t_s must be >= 0")
    k = int(math.floor(t_s / hypnogram.epoch_s))
    if k >= len(hypnogram.stages):
        return Stage.UNKNOWN
    return hypnogram.stages[k]


@dataclass(frozen=True, eq=False)
class RecordingBundle:
    subject_id: str
    recording_id: str
    respiration: SignalTrace
    hypnogram: Hypnogram
    annotations: tuple[EventAnnotation, ...] = ()
    spo2: SignalTrace | None = None
    airflow: SignalTrace | None = None
    notes: str = ""

    def __post_init__(self):
        if not self.subject_id:
            raise DataError("subject_id must be non-empty")
        traces = [t for t in (self.respiration, self.spo2, self.airflow) if t is not None]
        lo = max(t.start_offset_s for t in traces)
        hi = min(t.end_s for t in traces)
        if hi - lo < MIN_COMMON_SPAN_S:
            raise DataError(
                f"{self.recording_id}: traces share only {max(0.0, hi - lo):.1f} s (< {MIN_COMMON_SPAN_S:.0f} s)"
            )
        object.__setattr__(self, "annotations", _trim_annotations(self.annotations, self.span, self.recording_id))

    @property
    def span(self) -> tuple[float, float]:
        return self.respiration.start_offset_s, self.respiration.end_s

    def respiratory_events(self) -> tuple[EventAnnotation, ...]:
        return tuple(e for e in self.annotations if e.kind.is_respiratory)

    def with_annotations(self, events: Iterable[EventAnnotation]) -> "RecordingBundle":
        return replace(self, annotations=event_list(events))


def _trim_annotations(events, span, recording_id):
    lo, hi = span
    kept = []
    for e in events:
        s, t = max(e.start_s, lo), min(e.end_s, hi)
        if t <= s:
            logger.info("%s: dropped annotation outside recording span: %s", recording_id, e)
            continue
        if (s, t) != (e.start_s, e.end_s):
            logger.info("%s: trimmed annotation %s to [%g, %g)", recording_id, e, s, t)
            e = EventAnnotation(s, t - s, e.kind)
        kept.append(e)
    return event_list(kept)


# -- preprocessing -----------------------------------------------------------


def clipped_moments(x: np.ndarray, lo_q: float = 0.01, hi_q: float = 0.99) -> tuple[float, float]:
    """Mean and population std of ``x`` clipped to its quantile band."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = np.quantile(x, [lo_q, hi_q])
    c = np.clip(x, lo, hi)
    return float(c.mean()), float(c.std())


def normalize_respiration(trace: SignalTrace) -> SignalTrace:
    """Z-score the trace with moments taken from its 1%/99% quantile-clipped copy.

    The clipping only affects the statistics; the returned samples are the
    unclipped ones, shifted and scaled.
    """
    if len(trace) < 100:
        raise DegenerateInput(f"normalization needs >= 100 samples, got {len(trace)}")
    mu, sigma = clipped_moments(trace.samples)
    if sigma < 1e-9:
        raise DegenerateSignal("respiration trace is (near) constant")
    return trace.with_samples((trace.samples - mu) / sigma)


def moving_average(trace: SignalTrace, width_s: float) -> SignalTrace:
    """Centered moving average; windows are truncated at the edges."""
    if not width_s > 0:
        raise ValueError("width_s must be > 0")
    return trace.with_samples(centered_mean(trace.samples, max(1, int(round(width_s * trace.rate_hz)))))


def centered_mean(x: np.ndarray, w: int) -> np.ndarray:
    n = x.size
    if w <= 1:
        return x.copy()
    cs = np.concatenate(([0.0], np.cumsum(x)))
    i = np.arange(n)
    lo = np.maximum(i - (w - 1) // 2, 0)
    hi = np.minimum(i + w // 2 + 1, n)
    return (cs[hi] - cs[lo]) / (hi - lo)


def slice_trace(trace: SignalTrace, t0_s: float, t1_s: float) -> SignalTrace:
    """Sub-trace covering ``[t0_s, t1_s)``; bounds are clamped to the trace span."""
    i0 = max(0, int(math.ceil((t0_s - trace.start_offset_s) * trace.rate_hz - 1e-9)))
    i1 = min(len(trace), int(math.ceil((t1_s - trace.start_offset_s) * trace.rate_hz - 1e-9)))
    if i1 <= i0:
        raise EmptySlice(f"slice [{t0_s}, {t1_s}) is empty for trace [{trace.start_offset_s}, {trace.end_s})")
    return SignalTrace(trace.samples[i0:i1], trace.rate_hz, trace.start_offset_s + i0 / trace.rate_hz)


# -- ingestion ------------------------------------------------------------------


def fill_gaps(t: np.ndarray, v: np.ndarray, max_gap_s: float = MAX_GAP_S, name: str = "") -> tuple[np.ndarray, np.ndarray]:
    """Interpolate short non-finite runs; reject the trace on longer ones.

    Leading and trailing runs cannot be interpolated and are trimmed when short.
    """
    bad = ~np.isfinite(v)
    if not bad.any():
        return t, v
    if bad.all():
        raise DataError(f"{name}: no finite samples")
    dt = float(np.median(np.diff(t))) if t.size > 1 else 0.0
    edges = np.flatnonzero(np.diff(np.concatenate(([0], bad.astype(np.int8), [0]))))
    for a, b in zip(edges[::2], edges[1::2]):
        run_s = t[b - 1] - t[a] + dt
        if run_s > max_gap_s:
            raise DataError(f"{name}: non-finite run of {run_s:.2f} s at t={t[a]:.2f} exceeds {max_gap_s} s")
    good = ~bad
    first, last = np.flatnonzero(good)[[0, -1]]
    t, v, good = t[first:last + 1], v[first:last + 1].copy(), good[first:last + 1]
    v[~good] = np.interp(t[~good], t[good], v[good])
    return t, v


def resample(t: np.ndarray, v: np.ndarray, rate_hz: float) -> SignalTrace:
    """Linear interpolation onto a ``rate_hz`` grid starting at ``t[0]``."""
    if t.size < 2:
        return SignalTrace(v, rate_hz, float(t[0]))
    n = int(math.floor((t[-1] - t[0]) * rate_hz + 1e-9)) + 1
    grid = t[0] + np.arange(n) / rate_hz
    return SignalTrace(np.interp(grid, t, v), rate_hz, float(t[0]))


def read_signal_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "t_s,value":
        raise LoadError(f"{path}:1: expected header 't_s,value'")
    n = len(lines) - 1
    t = np.empty(n)
    v = np.empty(n)
    k = 0
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise LoadError(f"{path}:{lineno}: expected 2 columns, got {len(parts)}")
        try:
            t[k] = float(parts[0])
            v[k] = float(parts[1])
        except ValueError:
            raise LoadError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
        if not math.isfinite(t[k]):
            raise LoadError(f"{path}:{lineno}: non-finite timestamp")
        if k and t[k] <= t[k - 1]:
            raise LoadError(f"{path}:{lineno}: timestamps must increase strictly")
        k += 1
    if k == 0:
        raise LoadError(f"{path}:2: no samples")
    return t[:k], v[:k]


def load_trace(path: Path, rate_hz: float) -> SignalTrace:
    t, v = read_signal_csv(path)
    t, v = fill_gaps(t, v, name=str(path))
    return resample(t, v, rate_hz)


def read_hypnogram(path: Path, epoch_s: float = 30.0) -> Hypnogram:
    path = Path(path)
    codes = {s.value: s for s in Stage}
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "epoch_index,stage":
        raise LoadError(f"{path}:1: expected header 'epoch_index,stage'")
    stages = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise LoadError(f"{path}:{lineno}: expected 2 columns")
        try:
            idx = int(parts[0])
        except ValueError:
            raise LoadError(f"{path}:{lineno}: bad epoch index {parts[0]!r}") from None
        if idx != len(stages):
            raise LoadError(f"{path}:{lineno}: epoch index {idx} out of sequence (expected {len(stages)})")
        code = parts[1].strip()
        if code not in codes:
            raise LoadError(f"{path}:{lineno}: unknown stage {code!r}")
        stages.append(codes[code])
    if not stages:
        raise LoadError(f"{path}:2: empty hypnogram")
    return Hypnogram(tuple(stages), epoch_s)


def read_annotations(path: Path) -> tuple[EventAnnotation, ...]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(data, list):
        raise LoadError(f"{path}:1: expected a JSON array")
    out = []
    for i, item in enumerate(data):
        where = f"{path}:item {i}"
        if not isinstance(item, dict) or set(item) != {"start_s", "duration_s", "kind"}:
            raise LoadError(f"{where}: expected keys start_s, duration_s, kind")
        if item["kind"] not in ANNOTATION_KINDS:
            raise LoadError(f"{where}: unknown kind {item['kind']!r}")
        try:
            out.append(EventAnnotation(float(item["start_s"]), float(item["duration_s"]), EventKind(item["kind"])))
        except (TypeError, ValueError, DataError) as exc:
            raise LoadError(f"{where}: {exc}") from None
    return event_list(out)


def write_annotations(path: Path, events: Iterable[EventAnnotation]) -> None:
    atomic_write_text(Path(path), json.dumps([e.to_json() for e in event_list(events)], indent=1) + "\n")


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def load_bundle(directory: Path, annotations_file: str = "annotations.json") -> RecordingBundle:
    d = Path(directory)
    meta_path = d / "meta.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise LoadError(f"{meta_path}:1: missing") from None
    except json.JSONDecodeError as exc:
        raise LoadError(f"{meta_path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(meta, dict) or not meta.get("subject_id") or not meta.get("recording_id"):
        raise LoadError(f"{meta_path}:1: subject_id and recording_id are required")
    if not (d / "respiration.csv").exists():
        raise LoadError(f"{d / 'respiration.csv'}:1: missing")
    resp = load_trace(d / "respiration.csv", RESPIRATION_HZ)
    spo2 = load_trace(d / "spo2.csv", SPO2_HZ) if (d / "spo2.csv").exists() else None
    airflow = load_trace(d / "airflow.csv", AIRFLOW_HZ) if (d / "airflow.csv").exists() else None
    if (d / "hypnogram.csv").exists():
        hyp = read_hypnogram(d / "hypnogram.csv")
    else:
        logger.warning("%s: no hypnogram; treating the whole recording as sleep", d)
        hyp = Hypnogram.all_sleep(resp.end_s)
    ann_path = d / annotations_file
    events = read_annotations(ann_path) if ann_path.exists() else ()
    return RecordingBundle(
        subject_id=str(meta["subject_id"]),
        recording_id=str(meta["recording_id"]),
        respiration=resp,
        hypnogram=hyp,
        annotations=events,
        spo2=spo2,
        airflow=airflow,
        notes=str(meta.get("notes", "")),
    )


def _write_trace(path: Path, trace: SignalTrace, value_fmt: str) -> None:
    t = trace.times()
    body = "\n".join(f"{a:.3f},{b:{value_fmt}}" for a, b in zip(t, trace.samples))
    atomic_write_text(path, "t_s,value\n" + body + "\n")


def save_bundle(bundle: RecordingBundle, directory: Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_trace(d / "respiration.csv", bundle.respiration, ".5f")
    if bundle.spo2 is not None:
        _write_trace(d / "spo2.csv", bundle.spo2, ".3f")
    if bundle.airflow is not None:
        _write_trace(d / "airflow.csv", bundle.airflow, ".5f")
    if not bundle.hypnogram.assumed:
        rows = "\n".join(f"{i},{s.value}" for i, s in enumerate(bundle.hypnogram.stages))
        atomic_write_text(d / "hypnogram.csv", "epoch_index,stage\n" + rows + "\n")
    write_annotations(d / "annotations.json", bundle.annotations)
    meta = {"subject_id": bundle.subject_id, "recording_id": bundle.recording_id, "notes": bundle.notes}
    atomic_write_text(d / "meta.json", json.dumps(meta, indent=1) + "\n")
    return d


def find_bundles(data_dir: Path) -> list[Path]:
    """Bundle directories (those holding a meta.json) under ``data_dir``, sorted."""
    root = Path(data_dir)
    if (root / "meta.json").exists():
        return [root]
    return sorted(p.parent for p in root.glob("*/meta.json"))


def rasterize(events: Sequence[EventAnnotation], n_seconds: int, start_s: float = 0.0) -> np.ndarray:
    """Per-second indicator: second ``start_s + i`` lies inside some event."""
    out = np.zeros(n_seconds, dtype=bool)
    t = start_s + np.arange(n_seconds, dtype=np.float64)
    for e in events:
        lo = int(np.searchsorted(t, e.start_s, side="left"))
        hi = int(np.searchsorted(t, e.end_s, side="left"))
        out[lo:hi] = True
    return out
