"""Random-forest classifier grown from scratch, and the SpO2-only detector.

Trees are stored as flat node arrays (``feature == -1`` marks a leaf), which
keeps prediction a single compiled loop and makes the JSON model file a set of
plain arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import CorruptModel, DimensionMismatch, MissingSignal, SingleClass
from .featurize import SPO2_HORIZON_S, FeatureMatrix
from .recording import RecordingBundle, SignalTrace, atomic_write_text

SCHEMA_VERSION = 1
MAX_THRESHOLD_CANDIDATES = 64


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 300
    min_samples_split: int = 2
    max_features: int | None = None  # None -> round(sqrt(dim))
    class_weight_pos: float = 1.0
    neg_subsample_ratio: float = 1.0  # <= 0 keeps every negative
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    pos_weight: np.ndarray
    total_weight: np.ndarray
    n_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def depth(self) -> int:
        best = 0
        stack = [(0, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if not self.is_leaf(node):
                stack.extend(((self.left[node], d + 1), (self.right[node], d + 1)))
        return best

    def to_lists(self) -> list:
        return [
            self.feature.tolist(),
            self.threshold.tolist(),
            self.left.tolist(),
            self.right.tolist(),
            self.pos_weight.tolist(),
            self.total_weight.tolist(),
            self.n_samples.tolist(),
        ]

    @classmethod
    def from_lists(cls, arrays: list) -> "Tree":
        f, thr, lft, rgt, pw, tw, ns = arrays
        return cls(
            np.asarray(f, dtype=np.int64),
            np.asarray(thr, dtype=np.float64),
            np.asarray(lft, dtype=np.int64),
            np.asarray(rgt, dtype=np.int64),
            np.asarray(pw, dtype=np.float64),
            np.asarray(tw, dtype=np.float64),
            np.asarray(ns, dtype=np.int64),
        )


@dataclass(eq=False)
class ForestModel:
    trees: list[Tree]
    registry: tuple[str, ...]
    hyperparams: ForestParams
    decision_threshold: float = 0.5
    i_positive_predictions: int = 5
    flavor: str = ""
    provenance: dict = field(default_factory=dict)
    _flat: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.trees:
            raise CorruptModel("forest has no trees")
        dim = len(self.registry)
        for t in self.trees:
            if t.feature.size and int(t.feature.max()) >= dim:
                raise CorruptModel("tree references a feature outside the registry")
        if not 0.0 <= self.decision_threshold <= 1.0:
            raise CorruptModel("decision_threshold outside [0, 1]")
        if not 1 <= self.i_positive_predictions <= 10:
            raise CorruptModel("i_positive_predictions outside [1, 10]")

    def flat(self) -> tuple:
        if self._flat is None:
            sizes = [t.n_nodes for t in self.trees]
            offsets = np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)
            cat = lambda name: np.concatenate([getattr(t, name) for t in self.trees])
            with np.errstate(invalid="ignore", divide="ignore"):
                leaf = np.where(cat("total_weight") > 0, cat("pos_weight") / cat("total_weight"), 0.0)
            self._flat = (offsets, cat("feature"), cat("threshold"), cat("left"), cat("right"), leaf)
        return self._flat

    def with_postprocessing(self, decision_threshold: float, i_positive_predictions: int) -> "ForestModel":
        return ForestModel(
            self.trees, self.registry, self.hyperparams, float(decision_threshold), int(i_positive_predictions),
            self.flavor, dict(self.provenance), self._flat,
        )


def _canonical_order(values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row order independent of the input order: lexicographic on (features, label)."""
    keys = [labels] + [values[:, j] for j in range(values.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def _tree_sample(labels: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Bootstrap counts per row after downsampling negatives."""
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if ratio > 0:
        n_neg = min(neg.size, max(1, int(round(ratio * pos.size))))
        neg = np.sort(rng.choice(neg, size=n_neg, replace=False))
    subset = np.concatenate((pos, neg))
    draws = subset[rng.integers(0, subset.size, size=subset.size)]
    return np.bincount(draws, minlength=labels.size).astype(np.int64)


def train_forest(X: FeatureMatrix, hp: ForestParams, flavor: str = "", provenance: dict | None = None) -> ForestModel:
    """Bagged weighted-Gini trees; deterministic given ``hp.seed``."""
    values = np.ascontiguousarray(X.values, dtype=np.float64)
    labels = np.asarray(X.labels).astype(np.int64)
    if values.ndim != 2 or values.shape[1] != len(X.names):
        raise DimensionMismatch("feature matrix and names disagree")
    if values.shape[0] == 0 or np.unique(labels).size < 2:
        raise SingleClass("training labels contain a single class")
    if not np.all(np.isfinite(values)):
        raise DimensionMismatch("training matrix contains non-finite values")
    order = _canonical_order(values, labels)
    values = np.ascontiguousarray(values[order])
    labels = np.ascontiguousarray(labels[order])
    dim = values.shape[1]
    mtry = hp.max_features or int(round(math.sqrt(dim)))
    mtry = max(1, min(dim, mtry))
    weights = np.where(labels == 1, float(hp.class_weight_pos), 1.0)
    trees = []
    for k in range(hp.n_trees):
        rng = np.random.default_rng([hp.seed, k])
        counts = _tree_sample(labels, hp.neg_subsample_ratio, rng)
        tree_seed = int(rng.integers(0, 2**31 - 1))
        arrays = _kernels.grow_tree(
            values, labels, weights, counts, mtry, int(hp.min_samples_split), MAX_THRESHOLD_CANDIDATES, tree_seed
        )
        trees.append(Tree(*arrays))
    return ForestModel(trees, tuple(X.names), hp, flavor=flavor, provenance=dict(provenance or {}))


def _check_columns(model: ForestModel, names: Sequence[str]) -> None:
    names = tuple(names)
    if names == model.registry:
        return
    for i, (a, b) in enumerate(zip(model.registry, names)):
        if a != b:
            raise DimensionMismatch(f"column {i}: model expects {a!r}, got {b!r}")
    if len(names) < len(model.registry):
        raise DimensionMismatch(f"missing column {len(names)}: model expects {model.registry[len(names)]!r}")
    raise DimensionMismatch(f"unexpected extra column {names[len(model.registry)]!r}")


def predict_proba(model: ForestModel, X: FeatureMatrix | np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
    """Mean over trees of the leaf positive-weight fraction."""
    if isinstance(X, FeatureMatrix):
        values, names = X.values, X.names
    else:
        values = np.asarray(X, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != len(model.registry):
            raise DimensionMismatch(f"expected {len(model.registry)} columns, got {values.shape[-1]}")
    if names is not None:
        _check_columns(model, names)
    offsets, feat, thr, lft, rgt, leaf = model.flat()
    return _kernels.predict_forest(np.ascontiguousarray(values, dtype=np.float64), offsets, feat, thr, lft, rgt, leaf)


# -- persistence --------------------------------------------------------------


def model_to_json(model: ForestModel) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "forest",
        "flavor": model.flavor,
        "registry": list(model.registry),
        "hyperparams": asdict(model.hyperparams),
        "decision_threshold": model.decision_threshold,
        "i_positive_predictions": model.i_positive_predictions,
        "provenance": model.provenance,
        "trees": [t.to_lists() for t in model.trees],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_model(model, path: Path) -> None:
    text = model_to_json(model) if isinstance(model, ForestModel) else spo2_model_to_json(model)
    atomic_write_text(Path(path), text + "\n")


def load_model(path: Path):
    """Load a forest or SpO2-only model file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError) as exc:
        raise CorruptModel(f"{path}: unreadable ({exc})") from None
    except json.JSONDecodeError as exc:
        raise CorruptModel(f"{path}: not valid JSON at line {exc.lineno} ({exc.msg}); truncated file?") from None
    if not isinstance(doc, dict):
        raise CorruptModel(f"{path}: expected a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CorruptModel(f"{path}: schema_version {version!r}, this build reads {SCHEMA_VERSION}")
    kind = doc.get("kind")
    try:
        if kind == "spo2_only":
            return Spo2OnlyModel(float(doc["desat_threshold_pct"]), int(doc.get("i_positive_predictions", 1)))
        if kind != "forest":
            raise CorruptModel(f"{path}: unknown model kind {kind!r}")
        trees = [Tree.from_lists(t) for t in doc["trees"]]
        for t in trees:
            sizes = {len(getattr(t, f)) for f in ("feature", "threshold", "left", "right", "pos_weight", "total_weight", "n_samples")}
            if len(sizes) != 1:
                raise CorruptModel(f"{path}: tree arrays differ in length")
        return ForestModel(
            trees,
            tuple(doc["registry"]),
            ForestParams(**doc["hyperparams"]),
            float(doc["decision_threshold"]),
            int(doc["i_positive_predictions"]),
            str(doc.get("flavor", "")),
            dict(doc.get("provenance", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModel(f"{path}: schema_version {version}: missing or malformed field ({exc})") from None


# -- SpO2-only detector -------------------------------------------------------


@dataclass(frozen=True)
class Spo2OnlyModel:
    desat_threshold_pct: float = 3.0
    i_positive_predictions: int = 1

    def __post_init__(self):
        if not self.desat_threshold_pct > 0:
            raise CorruptModel("desaturation threshold must be > 0")


def spo2_model_to_json(model: Spo2OnlyModel) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "kind": "spo2_only", **asdict(model)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def spo2_drop_scores(spo2: SignalTrace | None, seconds: np.ndarray, horizon_s: float = SPO2_HORIZON_S) -> np.ndarray:
    """``spo2_drop`` at each given second; 0 where SpO2 does not cover the anchor."""
    if spo2 is None:
        raise MissingSignal("SpO2-only detection needs an SpO2 trace")
    vals, _ = _kernels.window_drop_series(
        spo2.samples, spo2.start_offset_s, spo2.rate_hz, np.asarray(seconds, dtype=np.float64), float(horizon_s)
    )
    return vals


def spo2_only_predict(model: Spo2OnlyModel, bundle: RecordingBundle) -> np.ndarray:
    """Per-second positives (seconds 0 .. floor(end) - 1 of the recording)."""
    n = int(math.floor(bundle.respiration.end_s))
    return spo2_drop_scores(bundle.spo2, np.arange(n)) >= model.desat_threshold_pct
