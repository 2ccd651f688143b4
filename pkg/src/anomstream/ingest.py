"""Stream construction: CSV loading, normalization, windows, synthetic data.

Ground-truth labels ride along on ``FeatureRecord`` for evaluation only; the
engine consumes the truth-free ``StreamRecord`` view, so labels cannot leak
into detection or training paths.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    AllFeaturesConstantError,
    EmptyAfterFilteringError,
    MissingFileError,
    SchemaMismatchError,
)
from .labels import Label
from .scorer import SequenceWindow

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class StreamRecord:
    """Engine-facing view of one stream sample: position and features only."""

    index: int
    features: np.ndarray


@dataclass(frozen=True, eq=False)
class FeatureRecord:
    """One timestamped feature vector with optional held-out ground truth."""

    index: int
    features: np.ndarray
    truth: Label | None = None
    timestamp: str | None = None

    def to_stream(self) -> StreamRecord:
        return StreamRecord(index=self.index, features=self.features)


@dataclass
class CsvSchema:
    """Column roles and label-value mapping for a feature CSV."""

    feature_columns: list[str]
    label_column: str | None = None
    timestamp_column: str | None = None
    label_map: dict[str, Label] = field(default_factory=dict)

    @classmethod
    def from_json(cls, path) -> "CsvSchema":
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"schema file not found: {path}")
        doc = json.loads(path.read_text(encoding="utf-8"))
        label_map = {
            value: Label.from_name(name)
            for value, name in doc.get("label_map", {}).items()
        }
        return cls(
            feature_columns=list(doc["features"]),
            label_column=doc.get("label"),
            timestamp_column=doc.get("timestamp"),
            label_map=label_map,
        )

    def to_json(self, path) -> None:
        doc = {
            "features": self.feature_columns,
            "label": self.label_column,
            "timestamp": self.timestamp_column,
            "label_map": {k: v.display for k, v in self.label_map.items()},
        }
        Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")


@dataclass
class CsvLoadResult:
    records: list[FeatureRecord]
    rejected: int


def load_csv(path, schema: CsvSchema) -> CsvLoadResult:
    """Parse a feature CSV in file order, dropping malformed rows.

    A row is rejected (and counted) when any feature cell fails to parse as
    a finite float or when its label value is absent from the schema's map.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"input file not found: {path}")
    records: list[FeatureRecord] = []
    rejected = 0
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        needed = list(schema.feature_columns)
        if schema.label_column:
            needed.append(schema.label_column)
        if schema.timestamp_column:
            needed.append(schema.timestamp_column)
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaMismatchError(f"columns missing from {path.name}: {missing}")
        for row in reader:
            try:
                values = np.array(
                    [float(row[c]) for c in schema.feature_columns], dtype=float
                )
            except (TypeError, ValueError):
                rejected += 1
                continue
            if not np.all(np.isfinite(values)):
                rejected += 1
                continue
            truth = None
            if schema.label_column:
                raw = row[schema.label_column]
                if raw not in schema.label_map:
                    rejected += 1
                    continue
                truth = schema.label_map[raw]
            timestamp = row[schema.timestamp_column] if schema.timestamp_column else None
            records.append(
                FeatureRecord(
                    index=len(records), features=values, truth=truth, timestamp=timestamp
                )
            )
    if rejected:
        logger.warning("dropped %d malformed rows from %s", rejected, path.name)
    if not records:
        raise EmptyAfterFilteringError(f"no usable rows in {path}")
    return CsvLoadResult(records=records, rejected=rejected)


@dataclass
class MinMaxNormalizer:
    """Per-feature min-max scaling learned from the first-round slice.

    Constant features are dropped; live values outside the learned range
    clip to [0, 1].
    """

    mins: np.ndarray
    maxs: np.ndarray
    kept: np.ndarray  # indices into the raw feature vector

    @property
    def n_features(self) -> int:
        return int(self.kept.shape[0])

    def apply(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=float)[self.kept]
        return np.clip((x - self.mins) / (self.maxs - self.mins), 0.0, 1.0)


def fit_normalizer(records: Sequence[FeatureRecord]) -> MinMaxNormalizer:
    if not records:
        raise ValueError("cannot fit a normalizer on an empty slice")
    matrix = np.asarray([r.features for r in records], dtype=float)
    mins = matrix.min(axis=0)
    maxs = matrix.max(axis=0)
    kept = np.nonzero(maxs > mins)[0]
    dropped = matrix.shape[1] - kept.shape[0]
    if kept.size == 0:
        raise AllFeaturesConstantError("every feature is constant in the fitting slice")
    if dropped:
        logger.warning("dropped %d constant feature(s) during normalization", dropped)
    return MinMaxNormalizer(mins=mins[kept], maxs=maxs[kept], kept=kept)


def normalize_records(
    records: Sequence[FeatureRecord], normalizer: MinMaxNormalizer
) -> list[FeatureRecord]:
    return [
        FeatureRecord(
            index=r.index,
            features=normalizer.apply(r.features),
            truth=r.truth,
            timestamp=r.timestamp,
        )
        for r in records
    ]


def windows(records: Sequence[FeatureRecord | StreamRecord], timestep: int) -> Iterator[SequenceWindow]:
    """Sliding windows of length ``timestep`` with stride one.

    The first timestep - 1 records yield nothing; every later record yields
    exactly one window ending at it, so n records give max(0, n - T + 1)
    windows.
    """
    if timestep < 1:
        raise ValueError("timestep must be >= 1")
    for end in range(timestep - 1, len(records)):
        rows = np.stack(
            [records[i].features for i in range(end - timestep + 1, end + 1)]
        )
        yield SequenceWindow(rows=rows, end_index=records[end].index)


@dataclass
class SyntheticConfig:
    """Generator for desk-scale surrogate streams with optional mean drift.

    Normal rows are iid Gaussian around ``normal_mean`` (optionally drifting
    linearly from ``drift_start`` onward, up to ``drift_magnitude`` standard
    deviations at the end of the stream). Anomalies are shifted by
    ``anomaly_shift`` standard deviations relative to the current normal
    mean, with the shift sign alternating across features (a pattern change,
    not a uniform level change, so the signal survives min-max clipping
    under drift) and noise widened by ``anomaly_std_scale``. With
    ``anomaly_burst > 1`` each anomalous event spans that many consecutive
    records (attack episodes rather than isolated points); the overall
    anomalous fraction stays close to ``anomaly_rate`` either way.
    """

    n_records: int
    n_features: int = 8
    anomaly_rate: float = 0.015
    normal_mean: float = 10.0
    normal_std: float = 1.0
    anomaly_shift: float = 4.0
    anomaly_std_scale: float = 1.5
    anomaly_burst: int = 1
    drift_magnitude: float = 0.0
    drift_start: float = 0.5


def synthetic_stream(config: SyntheticConfig, seed: int) -> list[FeatureRecord]:
    """Seeded synthetic stream with truth labels attached."""
    rng = np.random.default_rng(seed)
    n, d = config.n_records, config.n_features
    burst = max(1, config.anomaly_burst)
    if burst == 1:
        is_abnormal = rng.random(n) < config.anomaly_rate
    else:
        starts = rng.random(n) < config.anomaly_rate / burst
        is_abnormal = np.zeros(n, dtype=bool)
        for i in np.nonzero(starts)[0]:
            is_abnormal[i : i + burst] = True
    noise = rng.standard_normal((n, d))
    t = np.arange(n, dtype=float) / max(n - 1, 1)
    if config.drift_start < 1.0:
        ramp = np.clip((t - config.drift_start) / (1.0 - config.drift_start), 0.0, 1.0)
    else:
        ramp = np.zeros(n)
    drift = config.drift_magnitude * config.normal_std * ramp
    mean = config.normal_mean + drift
    scale = np.where(is_abnormal, config.anomaly_std_scale, 1.0) * config.normal_std
    direction = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
    shift = np.where(is_abnormal, config.anomaly_shift * config.normal_std, 0.0)
    features = mean[:, None] + shift[:, None] * direction + scale[:, None] * noise
    return [
        FeatureRecord(
            index=i,
            features=features[i],
            truth=Label.ABNORMAL if is_abnormal[i] else Label.NORMAL,
        )
        for i in range(n)
    ]


def split_fractions(
    records: Sequence[FeatureRecord],
    first: float = 0.01,
    train: float = 0.69,
    test: float = 0.30,
) -> tuple[list[FeatureRecord], list[FeatureRecord], list[FeatureRecord]]:
    """Contiguous first-round/train/test split in stream order."""
    if abs(first + train + test - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n = len(records)
    a = int(round(first * n))
    b = a + int(round(train * n))
    return list(records[:a]), list(records[a:b]), list(records[b:])


def _day_of(record: FeatureRecord) -> str:
    stamp = record.timestamp or ""
    return stamp.replace("T", " ").split(" ")[0]


def split_days(
    records: Sequence[FeatureRecord],
    first_days: Sequence[str],
    test_days: Sequence[str],
) -> tuple[list[FeatureRecord], list[FeatureRecord], list[FeatureRecord]]:
    """Day-based split keyed on the date part of each record's timestamp."""
    first_set, test_set = set(first_days), set(test_days)
    first, train, test = [], [], []
    for r in records:
        day = _day_of(r)
        if day in first_set:
            first.append(r)
        elif day in test_set:
            test.append(r)
        else:
            train.append(r)
    return first, train, test
