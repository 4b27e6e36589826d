import numpy as np
import pytest

from llforest import (ConfigError, Dataset, ParseError, SchemaError, SeededRng, SizeError,
                      draw_disjoint_subsamples, load_csv, write_csv)
from llforest.dataset import load_features


class TestDataset:
    def test_shapes_and_readonly(self):
        d = Dataset(np.zeros((4, 2)), np.arange(4.0))
        assert (d.n, d.d) == (4, 2)
        with pytest.raises(ValueError):
            d.features[0, 0] = 1.0

    def test_rejects_nonfinite(self):
        X = np.ones((3, 2))
        X[1, 1] = np.nan
        with pytest.raises(ValueError):
            Dataset(X, np.zeros(3))

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(np.ones((3, 2)), np.zeros(4))

    def test_rejects_nonbinary_treatment(self):
        with pytest.raises(ValueError):
            Dataset(np.ones((3, 1)), np.zeros(3), np.array([0.0, 0.5, 1.0]))

    def test_subset_and_fingerprint(self):
        rng = np.random.default_rng(0)
        d = Dataset(rng.random((10, 3)), rng.random(10))
        sub = d.subset([1, 4])
        np.testing.assert_array_equal(sub.features, d.features[[1, 4]])
        assert d.fingerprint() == Dataset(d.features.copy(), d.responses.copy()).fingerprint()
        assert d.fingerprint() != d.with_responses(d.responses + 1).fingerprint()


class TestSeededRng:
    def test_same_stream_same_draws(self):
        a = SeededRng(5, 2).generator(1, 7).random(4)
        b = SeededRng(5, 2).generator(1, 7).random(4)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = SeededRng(5, 2).generator(1).random(4)
        b = SeededRng(5, 3).generator(1).random(4)
        c = SeededRng(5, 2).generator(2).random(4)
        assert not np.allclose(a, b) and not np.allclose(a, c)


class TestCsv:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "d.csv"
        write_csv(p, {"a": [0.1, 1 / 3], "y": [2.0, -1e-17], "w": [0.0, 1.0]})
        d = load_csv(p, "y", treatment_column="w")
        np.testing.assert_array_equal(d.features[:, 0], [0.1, 1 / 3])
        np.testing.assert_array_equal(d.responses, [2.0, -1e-17])
        assert d.column_names == ("a",)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b\n1,2\n3,4\n")
        with pytest.raises(SchemaError, match="y"):
            load_csv(p, "y")

    def test_parse_error_names_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,y\n1,2\n3,oops\n")
        with pytest.raises(ParseError) as exc:
            load_csv(p, "y")
        assert exc.value.row == 2 and exc.value.column == "y"
        assert "line 3" in str(exc.value)

    def test_too_few_rows(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,y\n1,2\n")
        with pytest.raises(SizeError):
            load_csv(p, "y")

    def test_load_features_order(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("b,a\n1,2\n3,4\n")
        np.testing.assert_array_equal(load_features(p, ["a", "b"]), [[2, 1], [4, 3]])


class TestDisjointSubsamples:
    def test_sizes_and_disjoint(self):
        J, I = draw_disjoint_subsamples(100, 50, 0.5, np.random.default_rng(1))
        assert len(J) == 25 and len(I) == 25
        assert not set(J) & set(I)

    def test_pool_respected(self):
        pool = np.arange(0, 100, 2)
        J, I = draw_disjoint_subsamples(100, 50, 0.3, np.random.default_rng(2), pool=pool)
        assert set(J) | set(I) == set(pool.tolist())
        assert len(J) == 35

    def test_oversized(self):
        with pytest.raises(SizeError):
            draw_disjoint_subsamples(10, 11, 0.5, np.random.default_rng(0))


def test_config_error_is_value_error():
    assert issubclass(ConfigError, ValueError)
