from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from apnea_kit.featurize import FeatureMatrix
from apnea_kit.synth import SynthSpec, synth_recording


def make_matrix(values, labels, names=None, group="r0") -> FeatureMatrix:
    values = np.asarray(values, dtype=np.float64)
    n, d = values.shape
    names = tuple(names or (f"f{j}" for j in range(d)))
    return FeatureMatrix(
        values, names, np.asarray(labels, dtype=np.int8), np.full(n, group, dtype=object),
        np.arange(n, dtype=np.int64), np.zeros(n, dtype=bool),
    )


@pytest.fixture(scope="session")
def short_bundle():
    """A 20-minute synthetic night with events, SpO2 and airflow."""
    spec = SynthSpec(n_subjects=1, nights_per_subject=1, hours=1 / 3, ahi_low=30, ahi_high=40, seed=5)
    bundle, _ = synth_recording(spec, 0, 0, 11, 12)
    return bundle


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool | None, detail: str) -> None:
    """Log one acceptance line; ``ok=None`` marks a skipped criterion."""
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"criterion {number:>2}: {status}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
