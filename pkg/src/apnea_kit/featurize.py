"""Per-second window feature bank from respiration (and optionally SpO2).

A 90 s window slides in 1 s steps. Each feature looks back ``width_s`` from a
position inside the window, so its value depends only on the absolute end
second ``window_start + position``. The bank therefore computes one series per
(family, width, source) over end seconds and every window column is a shifted
gather of that series.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import DegenerateInput, MissingSignal, DimensionMismatch, LoadError
from .recording import RecordingBundle, SignalTrace, moving_average, normalize_respiration, rasterize

logger = logging.getLogger(__name__)

POSITIONS_S = (10, 20, 30, 40, 45, 50, 55, 60, 65, 70, 80, 90)
SHORT_WIDTHS_S = (8, 10, 12)
COMPLEXITY_WIDTHS_S = (10, 30, 45, 60)
LONG_REF_WIDTHS_S = (300, 600)
WINDOW_S = 90
ANCHOR_S = 60
SPO2_HORIZON_S = 45.0
SPO2_MAX_LAG_S = 30.0
SPO2_LAG_STEP_S = 5.0
SMOOTH_WIDTH_S = 1.2
SAMPEN_M = 2
SAMPEN_R_FRAC = 0.2


class Family(str, enum.Enum):
    STD = "std"
    VENTILATION = "vent"
    SAMPLE_ENTROPY = "sampen"
    KATZ_FD = "katz"
    LONG_REF_STD = "longstd"
    LONG_REF_VENT = "longvent"
    SPO2_DROP = "spo2drop"
    SPO2_DROP_ROBUST = "spo2droprobust"


class Source(str, enum.Enum):
    RAW = "raw"
    SMOOTHED = "smooth"


@dataclass(frozen=True)
class FeatureSpec:
    family: Family
    width_s: float
    position_s: int | None = None
    source: Source | None = None

    @property
    def name(self) -> str:
        if self.position_s is None:
            return f"{self.family.value}_w{self.width_s:g}"
        name = f"{self.family.value}_pos{self.position_s}_w{self.width_s:g}"
        return f"{name}_{self.source.value}" if self.source is not None else name

    @property
    def series_key(self) -> tuple:
        return (self.family, self.width_s, self.source)

    @property
    def end_offset_s(self) -> int:
        """Offset of the lookback end from the window start."""
        if self.position_s is not None:
            return self.position_s
        if self.family in (Family.SPO2_DROP, Family.SPO2_DROP_ROBUST):
            return ANCHOR_S
        return WINDOW_S

    @property
    def uses_spo2(self) -> bool:
        return self.family in (Family.SPO2_DROP, Family.SPO2_DROP_ROBUST)


def build_registry(include_spo2: bool = False, robust: bool = False) -> tuple[FeatureSpec, ...]:
    """Ordered feature registry; only lookbacks that stay inside the window."""
    specs: list[FeatureSpec] = []
    for fam in (Family.STD, Family.VENTILATION):
        for pos in POSITIONS_S:
            specs.extend(FeatureSpec(fam, w, pos) for w in SHORT_WIDTHS_S if w <= pos)
    for fam in (Family.LONG_REF_STD, Family.LONG_REF_VENT):
        specs.extend(FeatureSpec(fam, w) for w in LONG_REF_WIDTHS_S)
    for fam in (Family.SAMPLE_ENTROPY, Family.KATZ_FD):
        for src in (Source.RAW, Source.SMOOTHED):
            for pos in POSITIONS_S:
                specs.extend(FeatureSpec(fam, w, pos, src) for w in COMPLEXITY_WIDTHS_S if w <= pos)
    if include_spo2:
        specs.append(FeatureSpec(Family.SPO2_DROP_ROBUST if robust else Family.SPO2_DROP, SPO2_HORIZON_S))
    return tuple(specs)


def registry_names(registry: Sequence[FeatureSpec]) -> tuple[str, ...]:
    return tuple(s.name for s in registry)


def registry_hash(names: Iterable[str]) -> str:
    return hashlib.sha256("\n".join(names).encode()).hexdigest()[:16]


def parse_feature_name(name: str) -> FeatureSpec:
    parts = name.split("_")
    try:
        fam = Family(parts[0])
        if len(parts) == 2:
            return FeatureSpec(fam, float(parts[1][1:]))
        pos = int(parts[1][3:])
        width = float(parts[2][1:])
        src = Source(parts[3]) if len(parts) == 4 else None
    except (ValueError, IndexError):
        raise DimensionMismatch(f"unrecognized feature name {name!r}") from None
    spec = FeatureSpec(fam, width, pos, src)
    if spec.name != name:
        raise DimensionMismatch(f"unrecognized feature name {name!r}")
    return spec


# -- scalar kernels -----------------------------------------------------------


def sample_entropy(seq: Sequence[float], m: int = SAMPEN_M, r: float | None = None) -> float:
    """Sample entropy with Chebyshev template matching, self-matches excluded.

    ``r`` defaults to 0.2 times the population std of ``seq``. When no
    (m+1)-template pair matches, a finite cap is returned: ``ln(B + 1)`` if
    some m-template pair matched, otherwise ``ln((N-m-1)(N-m))``.
    """
    x = np.ascontiguousarray(seq, dtype=np.float64)
    if x.size < m + 2:
        raise DegenerateInput(f"sample entropy needs at least m + 2 = {m + 2} samples, got {x.size}")
    if r is None:
        r = SAMPEN_R_FRAC * float(x.std())
    if not r > 0:
        raise DegenerateInput(f"tolerance r must be > 0, got {r}")
    a_count, b_count = _kernels.sampen_counts(x, m, float(r))
    return float(_kernels.sampen_from_counts(a_count, b_count, x.size, m))


def katz_fd(seq: Sequence[float]) -> float:
    """Katz fractal dimension of the planar curve (index, value).

    Degenerate curves (fewer than 3 points, or a path/chord ratio for which
    the formula has no clearly positive denominator) return 1.0.
    """
    x = np.ascontiguousarray(seq, dtype=np.float64)
    if x.size < 2:
        raise DegenerateInput("katz_fd needs at least 2 samples")
    return float(_kernels.katz_value(x))


def ventilation(seq: Sequence[float]) -> float:
    x = np.asarray(seq, dtype=np.float64)
    if x.size < 2:
        raise DegenerateInput("ventilation needs at least 2 samples")
    return float(np.maximum(np.diff(x), 0.0).sum())


def window_std(seq: Sequence[float]) -> float:
    x = np.asarray(seq, dtype=np.float64)
    if x.size < 2:
        raise DegenerateInput("window_std needs at least 2 samples")
    return float(x.std())


def spo2_drop(spo2: SignalTrace | None, t_event_s: float, horizon_s: float = SPO2_HORIZON_S) -> float:
    """Max SpO2 over ``[t - h, t]`` minus min over ``[t, t + h]``, floored at 0."""
    if spo2 is None:
        raise MissingSignal("SpO2 trace absent")
    out, valid = _kernels.window_drop_series(
        spo2.samples, spo2.start_offset_s, spo2.rate_hz, np.array([float(t_event_s)]), float(horizon_s)
    )
    if not valid[0]:
        raise MissingSignal(f"SpO2 does not cover [{t_event_s - horizon_s}, {t_event_s + horizon_s}]")
    return float(out[0])


def lag_grid(max_lag_s: float = SPO2_MAX_LAG_S, step_s: float = SPO2_LAG_STEP_S) -> np.ndarray:
    k = int(round(max_lag_s / step_s))
    return np.arange(-k, k + 1) * step_s


def spo2_drop_robust(
    spo2: SignalTrace | None,
    t_event_s: float,
    horizon_s: float = SPO2_HORIZON_S,
    max_lag_s: float = SPO2_MAX_LAG_S,
) -> float:
    """Largest drop over anchors shifted by -30, -25, ..., +30 s."""
    if spo2 is None:
        raise MissingSignal("SpO2 trace absent")
    anchors = float(t_event_s) + lag_grid(max_lag_s)
    out, valid = _kernels.window_drop_series(spo2.samples, spo2.start_offset_s, spo2.rate_hz, anchors, float(horizon_s))
    if not valid.any():
        raise MissingSignal(f"SpO2 does not cover any lag around t={t_event_s}")
    return float(out[valid].max())


# -- feature bank -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureBank:
    """Per-end-second feature series for one recording.

    ``series[key][e - first_s]`` is the feature whose lookback ends at
    absolute second ``e``; SpO2 series are indexed by their anchor second.
    """

    recording_id: str
    subject_id: str
    first_s: int
    window_starts: np.ndarray
    labels: np.ndarray
    series: dict = field(default_factory=dict)
    spo2_valid: dict = field(default_factory=dict)

    @property
    def n_windows(self) -> int:
        return self.window_starts.size

    def with_spo2(self, spo2: SignalTrace | None, registry: Sequence[FeatureSpec]) -> "FeatureBank":
        series = {k: v for k, v in self.series.items() if k[0] not in (Family.SPO2_DROP, Family.SPO2_DROP_ROBUST)}
        valid = {}
        for spec in registry:
            if spec.uses_spo2:
                series[spec.series_key], valid[spec.series_key] = _spo2_series(spo2, spec, self._n_ends(), self.first_s)
        return FeatureBank(self.recording_id, self.subject_id, self.first_s, self.window_starts, self.labels, series, valid)

    def _n_ends(self) -> int:
        return self.n_windows + WINDOW_S + 1


def window_starts_for(trace: SignalTrace, window_s: int = WINDOW_S, step_s: int = 1) -> np.ndarray:
    t0 = int(math.ceil(trace.start_offset_s - 1e-9))
    t1 = int(math.floor(trace.end_s - window_s + 1e-9))
    if t1 < t0:
        raise DegenerateInput(f"respiration is {trace.duration_s:.1f} s, shorter than one {window_s} s window")
    return np.arange(t0, t1 + 1, step_s, dtype=np.int64)


def _spo2_series(spo2, spec, n_ends, first_s):
    if spo2 is None:
        raise MissingSignal(f"feature {spec.name} needs an SpO2 trace")
    anchors = first_s + np.arange(n_ends, dtype=np.float64)
    if spec.family is Family.SPO2_DROP:
        vals, valid = _kernels.window_drop_series(spo2.samples, spo2.start_offset_s, spo2.rate_hz, anchors, spec.width_s)
    else:
        lags = lag_grid()
        lo = int(lags[0])
        ext = first_s + lo + np.arange(n_ends + len(lags) * int(SPO2_LAG_STEP_S), dtype=np.float64)
        base, base_valid = _kernels.window_drop_series(spo2.samples, spo2.start_offset_s, spo2.rate_hz, ext, spec.width_s)
        vals = np.zeros(n_ends)
        valid = np.zeros(n_ends, dtype=bool)
        for lag in lags:
            sl = slice(int(lag) - lo, int(lag) - lo + n_ends)
            v = np.where(base_valid[sl], base[sl], 0.0)
            vals = np.maximum(vals, v)
            valid |= base_valid[sl]
    return np.where(valid, vals, 0.0), valid


def _std_series(x, end_idx, width):
    out = np.full(end_idx.size, np.nan)
    ok = (end_idx - width >= 0) & (end_idx <= x.size)
    if ok.any():
        view = sliding_window_view(x, width)
        out[ok] = view[end_idx[ok] - width].std(axis=1)
    return out


def _vent_series(x, end_idx, width):
    cps = np.concatenate(([0.0], np.cumsum(np.maximum(np.diff(x), 0.0))))
    out = np.full(end_idx.size, np.nan)
    ok = (end_idx - width >= 0) & (end_idx <= x.size)
    out[ok] = cps[end_idx[ok] - 1] - cps[end_idx[ok] - width]
    return out


def _long_ref_series(x, end_idx, width, rate_hz, kind):
    """Lookback over recording history, shortened when history is short."""
    cs = np.concatenate(([0.0], np.cumsum(x)))
    cs2 = np.concatenate(([0.0], np.cumsum(x * x)))
    cps = np.concatenate(([0.0], np.cumsum(np.maximum(np.diff(x), 0.0))))
    min_hist = int(round(WINDOW_S * rate_hz))
    e = np.clip(end_idx, 0, x.size)
    lo = np.maximum(e - width, 0)
    n = e - lo
    if kind is Family.LONG_REF_STD:
        full = float(x.std())
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = (cs[e] - cs[lo]) / n
            var = (cs2[e] - cs2[lo]) / n - mean * mean
        vals = np.sqrt(np.maximum(var, 0.0))
    else:
        full = float(cps[-1])
        vals = cps[np.maximum(e - 1, 0)] - cps[lo]
    return np.where(n >= min_hist, vals, full)


def build_bank(
    bundle: RecordingBundle,
    registry: Sequence[FeatureSpec],
    labels_from: Sequence | None = None,
) -> FeatureBank:
    """Compute every series the registry needs for one recording."""
    resp = normalize_respiration(bundle.respiration)
    starts = window_starts_for(resp)
    first_s = int(starts[0])
    n_ends = starts.size + WINDOW_S + 1
    ends_s = first_s + np.arange(n_ends)
    end_idx = np.rint((ends_s - resp.start_offset_s) * resp.rate_hz).astype(np.int64)
    raw = np.ascontiguousarray(resp.samples)
    smooth = None
    rate = resp.rate_hz

    series: dict = {}
    valid: dict = {}
    for spec in registry:
        key = spec.series_key
        if key in series:
            continue
        w = int(round(spec.width_s * rate))
        if spec.family is Family.STD:
            series[key] = _std_series(raw, end_idx, w)
        elif spec.family is Family.VENTILATION:
            series[key] = _vent_series(raw, end_idx, w)
        elif spec.family in (Family.LONG_REF_STD, Family.LONG_REF_VENT):
            series[key] = _long_ref_series(raw, end_idx, w, rate, spec.family)
        elif spec.family in (Family.SAMPLE_ENTROPY, Family.KATZ_FD):
            if spec.source is Source.SMOOTHED:
                if smooth is None:
                    smooth = np.ascontiguousarray(moving_average(resp, SMOOTH_WIDTH_S).samples)
                x = smooth
            else:
                x = raw
            if spec.family is Family.SAMPLE_ENTROPY:
                series[key] = _kernels.sampen_series(x, end_idx, w, SAMPEN_M, SAMPEN_R_FRAC)
            else:
                series[key] = _kernels.katz_series(x, end_idx, w)
        elif spec.uses_spo2:
            series[key], valid[key] = _spo2_series(bundle.spo2, spec, n_ends, first_s)
    events = bundle.respiratory_events() if labels_from is None else labels_from
    labels = rasterize(events, starts.size, first_s + ANCHOR_S)
    return FeatureBank(bundle.recording_id, bundle.subject_id, first_s, starts, labels.astype(np.int8), series, valid)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    names: tuple[str, ...]
    labels: np.ndarray
    groups: np.ndarray
    window_starts: np.ndarray
    spo2_imputed: np.ndarray

    def __post_init__(self):
        n = self.values.shape[0]
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise DimensionMismatch("values do not match the column names")
        for arr in (self.labels, self.groups, self.window_starts, self.spo2_imputed):
            if arr.shape[0] != n:
                raise DimensionMismatch("row-aligned arrays disagree in length")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def columns(self, names: Sequence[str]) -> "FeatureMatrix":
        pos = {n: i for i, n in enumerate(self.names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise DimensionMismatch(f"feature {missing[0]!r} not in matrix")
        cols = [pos[n] for n in names]
        return FeatureMatrix(self.values[:, cols], tuple(names), self.labels, self.groups, self.window_starts, self.spo2_imputed)

    def rows(self, mask) -> "FeatureMatrix":
        return FeatureMatrix(
            self.values[mask], self.names, self.labels[mask], self.groups[mask], self.window_starts[mask], self.spo2_imputed[mask]
        )

    @staticmethod
    def concat(parts: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        if not parts:
            raise DimensionMismatch("nothing to concatenate")
        names = parts[0].names
        for p in parts[1:]:
            if p.names != names:
                raise DimensionMismatch("column order differs between matrices")
        return FeatureMatrix(
            np.concatenate([p.values for p in parts]),
            names,
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.groups for p in parts]),
            np.concatenate([p.window_starts for p in parts]),
            np.concatenate([p.spo2_imputed for p in parts]),
        )


def gather(bank: FeatureBank, registry: Sequence[FeatureSpec], row_index: np.ndarray | None = None) -> FeatureMatrix:
    """Materialize window rows (indices into ``bank.window_starts``)."""
    rows = np.arange(bank.n_windows) if row_index is None else np.asarray(row_index, dtype=np.int64)
    offs = bank.window_starts[rows] - bank.first_s
    values = np.empty((rows.size, len(registry)))
    imputed = np.zeros(rows.size, dtype=bool)
    for j, spec in enumerate(registry):
        try:
            s = bank.series[spec.series_key]
        except KeyError:
            raise DimensionMismatch(f"feature {spec.name} was not computed for {bank.recording_id}") from None
        values[:, j] = s[offs + spec.end_offset_s]
        if spec.uses_spo2:
            imputed |= ~bank.spo2_valid[spec.series_key][offs + spec.end_offset_s]
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values).all(axis=0))[0])
        raise DimensionMismatch(f"non-finite values in column {registry[bad].name} for {bank.recording_id}")
    groups = np.full(rows.size, bank.recording_id, dtype=object)
    return FeatureMatrix(values, registry_names(registry), bank.labels[rows].copy(), groups, bank.window_starts[rows].copy(), imputed)


def extract_windows(
    bundle: RecordingBundle,
    registry: Sequence[FeatureSpec],
    step_s: int = 1,
    window_s: int = WINDOW_S,
) -> FeatureMatrix:
    if window_s != WINDOW_S:
        raise DegenerateInput(f"feature positions are defined for a {WINDOW_S} s window")
    if bundle.respiration.duration_s < window_s:
        raise DegenerateInput("respiration shorter than one window")
    bank = build_bank(bundle, registry)
    rows = np.arange(0, bank.n_windows, int(step_s))
    return gather(bank, registry, rows)


# -- persistence --------------------------------------------------------------


def save_matrix(fm: FeatureMatrix, out_dir: Path) -> None:
    from .recording import atomic_write_text

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["window_start_s," + ",".join(fm.names)]
    for t, row in zip(fm.window_starts, fm.values):
        lines.append(f"{t}," + ",".join(repr(float(v)) for v in row))
    atomic_write_text(out / "features.csv", "\n".join(lines) + "\n")
    labels = ["window_start_s,label,spo2_imputed"] + [
        f"{t},{int(y)},{int(q)}" for t, y, q in zip(fm.window_starts, fm.labels, fm.spo2_imputed)
    ]
    atomic_write_text(out / "labels.csv", "\n".join(labels) + "\n")
    groups = ["window_start_s,recording_id"] + [f"{t},{g}" for t, g in zip(fm.window_starts, fm.groups)]
    atomic_write_text(out / "groups.csv", "\n".join(groups) + "\n")


def load_matrix(in_dir: Path) -> FeatureMatrix:
    d = Path(in_dir)

    def read(name):
        path = d / name
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise LoadError(f"{path}:1: empty file")
        return path, rows[0], rows[1:]

    fpath, header, body = read("features.csv")
    names = tuple(header[1:])
    try:
        arr = np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(header))
    except ValueError as exc:
        raise LoadError(f"{fpath}: {exc}") from None
    _, _, lbody = read("labels.csv")
    _, _, gbody = read("groups.csv")
    return FeatureMatrix(
        arr[:, 1:],
        names,
        np.array([int(r[1]) for r in lbody], dtype=np.int8),
        np.array([r[1] for r in gbody], dtype=object),
        arr[:, 0].astype(np.int64),
        np.array([bool(int(r[2])) for r in lbody]),
    )
