import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from llforest import (ForestConfig, RegressionModel, SchemaError, SimSpec, fit_llf, fit_rf, generate,
                      load_model, write_csv)
from llforest.cli import main
from llforest.model import FORMAT_VERSION


@pytest.fixture(scope="module")
def model(friedman_small):
    data, _ = friedman_small
    return fit_llf(data, ForestConfig(num_trees=50, seed=2))


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestModel:
    def test_round_trip_predictions(self, model, tmp_path):
        p = tmp_path / "m.json"
        model.save(p)
        back = load_model(p)
        X = np.random.default_rng(0).random((20, model.data.d))
        a, b = model.predict(X, ci_level=0.9), back.predict(X, ci_level=0.9)
        np.testing.assert_array_equal(a.mu, b.mu)
        np.testing.assert_array_equal(a.ci_lo, b.ci_lo)
        np.testing.assert_array_equal(model.predict().mu, back.predict().mu)
        assert back.provenance == model.provenance
        assert back.lambda_predict == model.lambda_predict

    def test_file_layout(self, model, tmp_path):
        p = tmp_path / "m.json"
        model.save(p)
        d = json.loads(p.read_text())
        assert d["format_version"] == FORMAT_VERSION and d["kind"] == "regression"
        assert {"config", "forest", "tuning", "provenance"} <= set(d)
        assert len(d["provenance"]["fingerprint"]) == 64

    def test_bad_version(self, model, tmp_path):
        d = model.to_dict()
        d["format_version"] = 99
        with pytest.raises(SchemaError):
            RegressionModel.from_dict(d)
        (tmp_path / "x.json").write_text("not json")
        with pytest.raises(SchemaError):
            load_model(tmp_path / "x.json")

    def test_interval_contains_prediction(self, model):
        p = model.predict(np.random.default_rng(1).random((30, model.data.d)), ci_level=0.95)
        assert np.all(p.ci_lo <= p.mu) and np.all(p.mu <= p.ci_hi)

    def test_undefined_variance_is_nan(self, friedman_small):
        data, _ = friedman_small
        m = fit_llf(data, ForestConfig(num_trees=10, seed=3), lambda_predict=0.1, selected_features="all")
        p = m.predict(ci_level=0.9)
        undefined = np.isnan(p.sigma2)
        assert undefined.any() and (~undefined).any()
        assert np.all(np.isnan(p.ci_lo[undefined])) and np.all(np.isnan(p.ci_hi[undefined]))
        assert np.all(p.ci_lo[~undefined] <= p.mu[~undefined])

    def test_rf_is_kernel_average(self, friedman_small):
        data, _ = friedman_small
        rf = fit_rf(data, ForestConfig(num_trees=50, seed=2))
        assert rf.selected_features.size == 0 and rf.forest.config.split_rule.value == "cart"

    def test_fixed_lambda(self, friedman_small):
        data, _ = friedman_small
        m = fit_llf(data, ForestConfig(num_trees=20), lambda_predict=0.5, selected_features="all")
        assert m.lambda_predict == 0.5 and m.selected_features is None


@pytest.fixture(scope="module")
def train_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "train.csv"
    data, _ = generate(SimSpec("friedman", n=120, d=5, seed=4))
    cols = {n: data.features[:, j] for j, n in enumerate(data.column_names)}
    cols["y"] = data.responses
    write_csv(path, cols)
    return path


class TestCli:
    def test_fit_predict_oob_with_ci(self, train_csv, tmp_path, capsys):
        m = tmp_path / "m.json"
        assert main(["fit", "--data", str(train_csv), "--response", "y", "--out", str(m), "--trees", "50",
                     "--seed", "7"]) == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["n"] == 120
        out = tmp_path / "p.csv"
        assert main(["predict", "--model", str(m), "--out", str(out), "--ci", "0.95"]) == 0
        rows = read_csv(out)
        assert len(rows) == 120 and list(rows[0]) == ["prediction", "ci_lo", "ci_hi"]
        assert all(float(r["ci_lo"]) <= float(r["prediction"]) <= float(r["ci_hi"]) for r in rows)

    def test_logs_resolved_config(self, train_csv, tmp_path, capsys):
        main(["fit", "--data", str(train_csv), "--response", "y", "--out", str(tmp_path / "m.json"),
              "--trees", "10"])
        err = capsys.readouterr().err
        assert '"mtry": 3' in err and '"residual_cutoff": 60' in err

    def test_predict_on_new_data(self, train_csv, tmp_path, capsys):
        m = tmp_path / "m.json"
        main(["fit", "--data", str(train_csv), "--response", "y", "--out", str(m), "--trees", "10",
              "--features", "x1,x2"])
        capsys.readouterr()
        assert main(["predict", "--model", str(m), "--data", str(train_csv)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "prediction" and len(lines) == 121

    def test_column_mismatch_exit_2(self, train_csv, tmp_path, capsys):
        m = tmp_path / "m.json"
        main(["fit", "--data", str(train_csv), "--response", "y", "--out", str(m), "--trees", "10"])
        bad = tmp_path / "bad.csv"
        bad.write_text("x1,x2\n0.1,0.2\n0.3,0.4\n")
        capsys.readouterr()
        assert main(["predict", "--model", str(m), "--data", str(bad)]) == 2
        assert "x3" in capsys.readouterr().err

    def test_missing_response_exit_2(self, train_csv):
        proc = subprocess.run([sys.executable, "-m", "llforest", "fit", "--data", str(train_csv), "--out", "x.json"],
                              capture_output=True, text=True)
        assert proc.returncode == 2 and "--response" in proc.stderr

    def test_unknown_response_column_exit_2(self, train_csv, tmp_path):
        assert main(["fit", "--data", str(train_csv), "--response", "nope", "--out", str(tmp_path / "m.json")]) == 2

    def test_missing_file_exit_2(self, tmp_path):
        assert main(["fit", "--data", str(tmp_path / "none.csv"), "--response", "y",
                     "--out", str(tmp_path / "m.json")]) == 2

    def test_fit_tune_writes_table(self, train_csv, tmp_path):
        m = tmp_path / "m.json"
        assert main(["fit", "--data", str(train_csv), "--response", "y", "--out", str(m), "--trees", "20",
                     "--tune"]) == 0
        rows = read_csv(str(m) + ".tuning.csv")
        assert len(rows) == 11 and {"lambda", "cv_mse", "reference"} <= set(rows[0])

    def test_tune_command(self, train_csv, tmp_path):
        out = tmp_path / "cv.csv"
        assert main(["tune", "--data", str(train_csv), "--response", "y", "--out", str(out), "--trees", "20",
                     "--min-leaf-grid", "3", "5"]) == 0
        assert len(read_csv(out)) == 22
        chosen = json.loads(out.with_suffix(".json").read_text())
        assert "lambda_predict" in chosen

    def test_weights_command(self, train_csv, tmp_path):
        m = tmp_path / "m.json"
        main(["fit", "--data", str(train_csv), "--response", "y", "--out", str(m), "--trees", "20"])
        out = tmp_path / "w.csv"
        assert main(["weights", "--model", str(m), "--x0", "0.5,0.5,0.5,0.5,0.5", "--out", str(out)]) == 0
        w = [float(r["alpha"]) for r in read_csv(out)]
        assert abs(sum(w) - 1) < 1e-12

    def test_simulate_and_bench(self, tmp_path):
        data, truth = tmp_path / "d.csv", tmp_path / "t.csv"
        assert main(["simulate", "--design", "step", "--n", "50", "--d", "3", "--out", str(data),
                     "--truth-out", str(truth)]) == 0
        assert len(read_csv(data)) == 50 and len(read_csv(truth)) == 50
        out = tmp_path / "b.csv"
        assert main(["bench", "rmse", "--design", "step", "--n", "100", "--d", "2", "--repeats", "1",
                     "--n-test", "50", "--trees", "20", "--out", str(out)]) == 0
        assert open(out).readline().startswith("method,d,n,sigma,rmse,coverage,length")

    def test_bad_simulation_dimension(self, tmp_path):
        assert main(["simulate", "--design", "friedman", "--n", "10", "--d", "3", "--out", str(tmp_path / "x")]) == 2

    def test_causal_round_trip(self, tmp_path):
        data, _ = generate(SimSpec("causal1", n=150, d=3, seed=1))
        path = tmp_path / "c.csv"
        cols = {n: data.features[:, j] for j, n in enumerate(data.column_names)}
        cols.update(y=data.responses, w=data.treatment)
        write_csv(path, cols)
        m = tmp_path / "c.json"
        assert main(["causal-fit", "--data", str(path), "--response", "y", "--treatment", "w", "--out", str(m),
                     "--trees", "20"]) == 0
        out = tmp_path / "tau.csv"
        assert main(["causal-predict", "--model", str(m), "--data", str(path), "--out", str(out)]) == 0
        assert len(read_csv(out)) == 150
        assert main(["predict", "--model", str(m)]) == 2
