"""Run configuration: hyperparameter grid, flavors, label sources."""

from __future__ import annotations

import enum
import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .featurize import FeatureSpec, build_registry
from .forest import ForestParams


class Flavor(str, enum.Enum):
    RESP_ONLY = "RespOnly"
    RESP_SPO2 = "RespSpo2"
    RESP_SPO2_ROBUST = "RespSpo2Robust"
    SPO2_ONLY = "Spo2Only"

    @property
    def needs_spo2(self) -> bool:
        return self is not Flavor.RESP_ONLY

    @property
    def uses_forest(self) -> bool:
        return self is not Flavor.SPO2_ONLY

    def registry(self) -> tuple[FeatureSpec, ...]:
        if self is Flavor.SPO2_ONLY:
            return ()
        return build_registry(include_spo2=self.needs_spo2, robust=self is Flavor.RESP_SPO2_ROBUST)


class LabelSource(str, enum.Enum):
    EXPERT4 = "Expert4"
    AUTO4 = "Auto4"
    AUTO3 = "Auto3"

    @property
    def annotations_file(self) -> str:
        return {"Expert4": "annotations.json", "Auto4": "annotations.auto4.json", "Auto3": "annotations.auto3.json"}[
            self.value
        ]


@dataclass(frozen=True)
class HyperGrid:
    min_samples_split: tuple = (2, 50, 200)
    neg_subsample_ratio: tuple = (1.0, 2.0, 4.0)
    class_weight_pos: tuple = (1.0, 2.0, 5.0)
    decision_threshold: tuple = tuple(round(0.3 + 0.05 * k, 2) for k in range(9))
    i_positive_predictions: tuple = (3, 4, 5, 6, 7, 8)
    spo2_desat_threshold: tuple = (3.0, 4.0)  # Spo2Only stage-2 sweep

    def __post_init__(self):
        for f in fields(self):
            v = tuple(getattr(self, f.name))
            if not v:
                raise ConfigError(f"grid.{f.name} is empty")
            object.__setattr__(self, f.name, v)
        if not all(0.0 <= t <= 1.0 for t in self.decision_threshold):
            raise ConfigError("grid.decision_threshold values must lie in [0, 1]")
        if not all(1 <= int(i) <= 10 for i in self.i_positive_predictions):
            raise ConfigError("grid.i_positive_predictions values must lie in [1, 10]")
        if not all(int(m) >= 2 for m in self.min_samples_split):
            raise ConfigError("grid.min_samples_split values must be >= 2")

    def train_configs(self) -> list[tuple[int, float, float]]:
        """(min_samples_split, neg_subsample_ratio, class_weight_pos) in canonical order."""
        return list(itertools.product(self.min_samples_split, self.neg_subsample_ratio, self.class_weight_pos))

    def post_configs(self) -> list[tuple[float, int]]:
        return list(itertools.product(self.decision_threshold, self.i_positive_predictions))


@dataclass(frozen=True)
class SelectionConfig:
    enabled: bool = True
    tau: float = 0.5
    repeats: int = 3
    prune_raw: bool = True
    stride_s: int = 10  # window stride for selection train/val rows
    n_trees: int = 50


@dataclass(frozen=True)
class RunConfig:
    data_dir: str = "data"
    output_dir: str = "runs"
    run_id: str = ""
    flavors: tuple = ("RespOnly", "RespSpo2", "RespSpo2Robust", "Spo2Only")
    label_source: str = "Expert4"
    grid: HyperGrid = field(default_factory=HyperGrid)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    seed: int = 0
    k_folds: int = 10
    feature_cap: int = 51
    n_trees: int = 300
    top_k: int = 3
    train_stride_s: int = 1
    wake_exclusion: str = "majority"  # or "strict"
    min_events: int = 5
    cache_dir: str = ""

    def __post_init__(self):
        try:
            flavors = tuple(Flavor(f) for f in self.flavors)
            LabelSource(self.label_source)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not flavors:
            raise ConfigError("flavors is empty")
        object.__setattr__(self, "flavors", tuple(f.value for f in flavors))
        if self.k_folds < 3:
            raise ConfigError("k_folds must be >= 3 (test, validation and training blocks)")
        if self.feature_cap < 10:
            raise ConfigError("feature_cap must be >= 10")
        if self.n_trees < 1 or self.top_k < 1 or self.train_stride_s < 1:
            raise ConfigError("n_trees, top_k and train_stride_s must be >= 1")
        if self.wake_exclusion not in ("majority", "strict"):
            raise ConfigError("wake_exclusion must be 'majority' or 'strict'")

    @property
    def flavor_list(self) -> list[Flavor]:
        return [Flavor(f) for f in self.flavors]

    @property
    def labels(self) -> LabelSource:
        return LabelSource(self.label_source)

    def forest_params(self, msplit: int, ratio: float, weight: float) -> ForestParams:
        return ForestParams(self.n_trees, int(msplit), None, float(weight), float(ratio), self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of everything that influences results (paths excluded)."""
        d = self.to_dict()
        for k in ("data_dir", "output_dir", "run_id", "cache_dir"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def resolved_run_id(self) -> str:
        return self.run_id or f"run-{self.digest()}"

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.resolved_run_id

    @property
    def resolved_cache_dir(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else Path(self.output_dir) / "cache"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "grid" in d:
                d["grid"] = _sub(HyperGrid, d["grid"], "grid")
            if "selection" in d:
                d["selection"] = _sub(SelectionConfig, d["selection"], "selection")
            if "flavors" in d:
                d["flavors"] = tuple(d["flavors"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None

    @classmethod
    def load(cls, path: Path, **overrides) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(doc)

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _sub(cls, value, name):
    if isinstance(value, cls):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be an object")
    unknown = set(value) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})
