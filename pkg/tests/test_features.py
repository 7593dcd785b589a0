from __future__ import annotations

import json

import mpmath
import numpy as np
import pytest

from adaensemble import autograd as ag
from adaensemble.autograd import Tensor
from adaensemble.features import (
    LOG_SQUARE_ZERO,
    MISSING,
    Bucketizer,
    DataError,
    EmbeddingTable,
    FeaturePipeline,
    FeatureSchema,
    FieldSpec,
    FitError,
    SchemaError,
    embed,
    fit_bucketizer,
    fit_vocabulary,
    log_square_transform,
    read_delimited,
    write_delimited,
)
from adaensemble.gradcheck import numeric_grad
from adaensemble.rng import make_rng


class TestLogSquare:
    def test_one(self):
        assert log_square_transform(1.0) == 0

    def test_zero_sentinel(self):
        assert log_square_transform(0.0) == LOG_SQUARE_ZERO

    def test_ten_against_high_precision(self):
        mpmath.mp.dps = 50
        assert log_square_transform(10.0) == int(mpmath.floor(mpmath.log(mpmath.mpf(10) ** 2))) == 4

    @pytest.mark.parametrize("v", [0.37, 2.5, 7.0, 123.456, 1e-5, 9.9e12, -3.0, -0.2])
    def test_matches_high_precision(self, v):
        mpmath.mp.dps = 50
        assert log_square_transform(v) == int(mpmath.floor(mpmath.log(mpmath.mpf(v) ** 2)))

    def test_sign_vanishes(self):
        assert log_square_transform(-42.0) == log_square_transform(42.0)


class TestBucketizer:
    def test_quartiles(self):
        b = fit_bucketizer(np.arange(1, 101), 4)
        assert b.boundaries == (25.5, 50.5, 75.5)
        counts = np.bincount(b.bucket_many(np.arange(1, 101)))
        assert counts.tolist() == [25, 25, 25, 25]

    def test_constant_column(self):
        b = fit_bucketizer([3.0] * 10, 8)
        assert b.boundaries == ()
        assert set(b.bucket_many(np.full(4, 3.0)).tolist()) == {0}

    def test_halves(self):
        b = fit_bucketizer(range(1, 9), 2)
        assert b.boundaries == (4.5,)
        assert [b.bucket(v) for v in range(1, 9)] == [0] * 4 + [1] * 4

    def test_errors(self):
        with pytest.raises(FitError):
            fit_bucketizer([], 4)
        with pytest.raises(FitError):
            fit_bucketizer([1.0, float("nan")], 4)
        with pytest.raises(FitError):
            fit_bucketizer([1.0, 2.0], 1)


class TestVocabulary:
    def test_threshold_boundary(self):
        schema = FeatureSchema.categorical(1)
        recs = [["rare"]] * 19 + [["kept"]] * 20
        vocab = fit_vocabulary(recs, schema, 20)
        assert vocab.encode(0, "rare") == 0
        assert vocab.encode(0, "kept") >= 1
        assert vocab.encode(0, "never-seen") == 0
        assert vocab.dropped == [1]

    def test_ordering(self):
        schema = FeatureSchema.categorical(1)
        recs = [["b"]] * 3 + [["a"]] * 3 + [["c"]] * 5
        assert fit_vocabulary(recs, schema, 1).index[0] == {"c": 1, "a": 2, "b": 3}

    def test_arity(self):
        with pytest.raises(SchemaError):
            fit_vocabulary([["a", "b"]], FeatureSchema.categorical(1), 1)


class TestEmbedding:
    def test_zero_row(self):
        t = EmbeddingTable.init([3, 4], 2, make_rng(0))
        for tab in t.tables:
            tab.data[0] = 0.0
        np.testing.assert_array_equal(embed(np.zeros((3, 2), dtype=int), t).data, 0.0)

    def test_direct_lookup(self):
        t = EmbeddingTable([Tensor(np.arange(9.0).reshape(3, 3)), Tensor(-np.arange(6.0).reshape(2, 3))])
        out = embed(np.array([[2, 1]]), t).data
        np.testing.assert_array_equal(out, [[[6.0, 7.0, 8.0], [-3.0, -4.0, -5.0]]])

    def test_gradient_only_reaches_looked_up_rows(self, rng):
        t = EmbeddingTable.init([4, 4], 3, make_rng(0))
        idx = np.array([[1, 0], [3, 0], [1, 2]])
        w = Tensor(rng.normal(size=(3, 2, 3)))
        fn = lambda: ag.sum_(embed(idx, t) * w * embed(idx, t))
        fn().backward()
        num = numeric_grad(fn, t.tables[0])
        np.testing.assert_allclose(t.tables[0].grad, num, rtol=1e-6, atol=1e-9)
        assert np.all(t.tables[0].grad[[0, 2, 4]] == 0.0)

    def test_out_of_range(self):
        t = EmbeddingTable.init([2], 2, make_rng(0))
        with pytest.raises(IndexError):
            embed(np.array([[3]]), t)


def mixed_schema():
    return FeatureSchema((FieldSpec("n0", "continuous"), FieldSpec("c0"), FieldSpec("c1")), 4)


def mixed_records(rng, n=200):
    recs = []
    for i in range(n):
        num = "" if i % 17 == 0 else f"{rng.normal(10, 5):.4f}"
        recs.append([num, f"lvl{rng.integers(0, 6)}", "rare" if i == 3 else f"x{i % 3}"])
    return recs


class TestPipeline:
    def test_fit_transform_ranges(self, rng):
        recs = mixed_records(rng)
        pipe = FeaturePipeline.fit(recs, mixed_schema(), bins=8, min_frequency=5)
        enc = pipe.transform(recs)
        assert enc.shape == (200, 3)
        for f, size in enumerate(pipe.vocab_sizes()):
            assert enc[:, f].min() >= 0 and enc[:, f].max() <= size
        assert pipe.levels(["", "a", "b"])[0] == MISSING

    def test_rare_level_reported(self, rng):
        recs = mixed_records(rng)
        pipe = FeaturePipeline.fit(recs, mixed_schema(), bins=8, min_frequency=20)
        row = pipe.summary(recs)[2]
        assert row["merged_levels"] == 1 and row["oov_rate"] == pytest.approx(1 / 200)

    def test_transform_is_pure(self, rng):
        recs = mixed_records(rng)
        pipe = FeaturePipeline.fit(recs, mixed_schema(), bins=8, min_frequency=5)
        np.testing.assert_array_equal(pipe.transform(recs), pipe.transform(recs))

    def test_log_square_mode(self):
        schema = FeatureSchema((FieldSpec("n0", "continuous"),), 4)
        pipe = FeaturePipeline.fit([["10"], ["10"], ["0"]], schema, min_frequency=1, continuous_transform="log_square")
        assert pipe.levels(["10"]) == ["l4"]

    def test_serialization_round_trip(self, rng, tmp_path):
        recs = mixed_records(rng)
        pipe = FeaturePipeline.fit(recs, mixed_schema(), bins=8, min_frequency=5)
        pipe.save(tmp_path / "a.json")
        again = FeaturePipeline.load(tmp_path / "a.json")
        np.testing.assert_array_equal(again.transform(recs), pipe.transform(recs))
        again.save(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_refit_is_byte_identical(self, rng, tmp_path):
        recs = mixed_records(rng)
        FeaturePipeline.fit(recs, mixed_schema(), bins=8, min_frequency=5).save(tmp_path / "a.json")
        FeaturePipeline.fit(recs, mixed_schema(), bins=8, min_frequency=5).save(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_schema_json(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps(mixed_schema().to_dict()))
        assert FeatureSchema.load(tmp_path / "s.json") == mixed_schema()


class TestDelimited:
    def test_round_trip(self, tmp_path):
        write_delimited(tmp_path / "d.tsv", [1, 0], [["a", "1.5"], ["b", ""]])
        labels, recs = read_delimited(tmp_path / "d.tsv", 2)
        assert labels.tolist() == [1.0, 0.0] and recs == [["a", "1.5"], ["b", ""]]

    def test_malformed_row_names_line(self, tmp_path):
        (tmp_path / "d.tsv").write_text("1\ta\tb\n0\ta\n")
        with pytest.raises(DataError, match="line 2"):
            read_delimited(tmp_path / "d.tsv", 2)

    def test_bad_label(self, tmp_path):
        (tmp_path / "d.tsv").write_text("2\ta\n")
        with pytest.raises(DataError, match="line 1"):
            read_delimited(tmp_path / "d.tsv", 1)
