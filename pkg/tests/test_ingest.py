"""Tests for CSV loading, normalization, windowing and synthetic streams."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anomstream.errors import (
    AllFeaturesConstantError,
    EmptyAfterFilteringError,
    MissingFileError,
    SchemaMismatchError,
)
from anomstream.ingest import (
    CsvSchema,
    FeatureRecord,
    SyntheticConfig,
    fit_normalizer,
    load_csv,
    normalize_records,
    split_days,
    split_fractions,
    synthetic_stream,
    windows,
)
from anomstream.labels import Label

SCHEMA = CsvSchema(
    feature_columns=["a", "b"],
    label_column="label",
    label_map={"Tor": Label.ABNORMAL, "Non-Tor": Label.NORMAL},
)


def write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadCsv:
    def test_malformed_row_dropped(self, tmp_path):
        p = write_csv(
            tmp_path / "x.csv",
            "a,b,label\n1,2,Non-Tor\noops,3,Tor\n4,5,Tor\n",
        )
        result = load_csv(p, SCHEMA)
        assert len(result.records) == 2
        assert result.rejected == 1
        assert result.records[0].index == 0
        assert result.records[1].features.tolist() == [4.0, 5.0]

    def test_label_mapping(self, tmp_path):
        p = write_csv(tmp_path / "x.csv", "a,b,label\n1,2,Tor\n3,4,Non-Tor\n")
        records = load_csv(p, SCHEMA).records
        assert records[0].truth is Label.ABNORMAL
        assert records[1].truth is Label.NORMAL

    def test_unmapped_label_rejected(self, tmp_path):
        p = write_csv(tmp_path / "x.csv", "a,b,label\n1,2,Tor\n3,4,???\n")
        result = load_csv(p, SCHEMA)
        assert len(result.records) == 1 and result.rejected == 1

    def test_empty_after_filtering(self, tmp_path):
        p = write_csv(tmp_path / "x.csv", "a,b,label\nbad,bad,Tor\n")
        with pytest.raises(EmptyAfterFilteringError):
            load_csv(p, SCHEMA)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_csv(tmp_path / "nope.csv", SCHEMA)

    def test_schema_mismatch(self, tmp_path):
        p = write_csv(tmp_path / "x.csv", "a,c,label\n1,2,Tor\n")
        with pytest.raises(SchemaMismatchError):
            load_csv(p, SCHEMA)

    def test_non_finite_rejected(self, tmp_path):
        p = write_csv(tmp_path / "x.csv", "a,b,label\ninf,2,Tor\n1,2,Tor\n")
        result = load_csv(p, SCHEMA)
        assert len(result.records) == 1 and result.rejected == 1

    def test_schema_round_trip(self, tmp_path):
        path = tmp_path / "schema.json"
        SCHEMA.to_json(path)
        loaded = CsvSchema.from_json(path)
        assert loaded == SCHEMA


def make_records(matrix, truth=None):
    return [
        FeatureRecord(index=i, features=np.asarray(row, dtype=float),
                      truth=None if truth is None else truth[i])
        for i, row in enumerate(matrix)
    ]


class TestNormalizer:
    def test_midpoint_maps_to_half(self):
        records = make_records([[0.0, 1.0], [10.0, 3.0]])
        nz = fit_normalizer(records)
        assert nz.apply(np.array([5.0, 2.0])) == pytest.approx([0.5, 0.5])

    def test_out_of_range_clips(self):
        records = make_records([[0.0], [10.0]])
        nz = fit_normalizer(records)
        assert nz.apply(np.array([-5.0])) == pytest.approx([0.0])
        assert nz.apply(np.array([25.0])) == pytest.approx([1.0])

    def test_constant_feature_dropped(self):
        records = make_records([[1.0, 7.0], [2.0, 7.0]])
        nz = fit_normalizer(records)
        assert nz.n_features == 1
        assert nz.kept.tolist() == [0]

    def test_all_constant_raises(self):
        with pytest.raises(AllFeaturesConstantError):
            fit_normalizer(make_records([[1.0], [1.0]]))

    def test_refit_on_normalized_is_identity(self):
        rng = np.random.default_rng(3)
        records = make_records(rng.normal(size=(50, 3)))
        nz = fit_normalizer(records)
        normalized = normalize_records(records, nz)
        nz2 = fit_normalizer(normalized)
        for r in normalized:
            assert nz2.apply(r.features) == pytest.approx(r.features, abs=1e-12)

    def test_truth_is_not_visible_downstream(self):
        record = FeatureRecord(index=0, features=np.array([1.0]), truth=Label.ABNORMAL)
        stream = record.to_stream()
        assert not hasattr(stream, "truth")


class TestWindows:
    def test_exact_fit(self):
        records = make_records(np.arange(10).reshape(5, 2))
        assert len(list(windows(records, 5))) == 1

    def test_unit_timestep(self):
        records = make_records(np.arange(10).reshape(5, 2))
        wins = list(windows(records, 1))
        assert len(wins) == 5
        assert wins[2].rows.shape == (1, 2)

    def test_window_contents_and_end_index(self):
        records = make_records(np.arange(12).reshape(6, 2))
        wins = list(windows(records, 3))
        assert wins[0].rows.tolist() == [[0, 1], [2, 3], [4, 5]]
        assert wins[-1].end_index == 5

    @given(st.integers(0, 40), st.integers(1, 12))
    @settings(max_examples=60, deadline=None)
    def test_count_formula(self, n, t):
        records = make_records(np.zeros((n, 1)))
        assert len(list(windows(records, t))) == max(0, n - t + 1)


class TestSynthetic:
    def test_zero_rate_all_normal(self):
        records = synthetic_stream(SyntheticConfig(n_records=500, anomaly_rate=0.0), seed=1)
        assert all(r.truth is Label.NORMAL for r in records)

    def test_count_within_binomial_bounds(self):
        config = SyntheticConfig(n_records=100_000, anomaly_rate=0.015)
        records = synthetic_stream(config, seed=5)
        count = sum(r.truth is Label.ABNORMAL for r in records)
        sigma = np.sqrt(100_000 * 0.015 * 0.985)
        assert abs(count - 1500) <= 3 * sigma

    def test_seed_determinism(self):
        config = SyntheticConfig(n_records=200, n_features=3, anomaly_rate=0.1)
        a = synthetic_stream(config, seed=9)
        b = synthetic_stream(config, seed=9)
        for ra, rb in zip(a, b):
            assert np.array_equal(ra.features, rb.features)
            assert ra.truth == rb.truth

    def test_burst_lengths(self):
        config = SyntheticConfig(n_records=50_000, anomaly_rate=0.02, anomaly_burst=10)
        records = synthetic_stream(config, seed=2)
        flags = np.array([r.truth is Label.ABNORMAL for r in records], dtype=int)
        frac = flags.mean()
        assert 0.01 < frac < 0.04
        # every abnormal run spans at least one full burst (overlapping
        # bursts extend it), except a possible truncated run at the end
        padded = np.concatenate([[0], flags, [0]])
        edges = np.flatnonzero(np.diff(padded))
        runs = edges[1::2] - edges[0::2]
        assert len(runs) > 10
        assert all(run >= 10 for run in runs[:-1])
        assert int(np.median(runs)) == 10

    def test_drift_moves_mean(self):
        config = SyntheticConfig(
            n_records=20_000, n_features=2, anomaly_rate=0.0,
            drift_magnitude=2.0, drift_start=0.5,
        )
        records = synthetic_stream(config, seed=3)
        head = np.mean([r.features for r in records[:5000]], axis=0)
        tail = np.mean([r.features for r in records[-2000:]], axis=0)
        assert np.all(tail - head > 1.5)


class TestSplits:
    def test_fractions(self):
        records = make_records(np.zeros((1000, 1)))
        first, train, test = split_fractions(records, 0.01, 0.69, 0.30)
        assert (len(first), len(train), len(test)) == (10, 690, 300)
        assert first[0].index == 0 and test[-1].index == 999

    def test_fractions_must_sum(self):
        with pytest.raises(ValueError):
            split_fractions(make_records(np.zeros((10, 1))), 0.5, 0.1, 0.1)

    def test_day_split(self):
        records = [
            FeatureRecord(index=i, features=np.zeros(1), timestamp=f"2020-01-0{d} 10:00")
            for i, d in enumerate([1, 2, 2, 3, 4, 4])
        ]
        first, train, test = split_days(records, ["2020-01-02"], ["2020-01-04"])
        assert [r.index for r in first] == [1, 2]
        assert [r.index for r in train] == [0, 3]
        assert [r.index for r in test] == [4, 5]
