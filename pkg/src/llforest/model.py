"""Fitted regression models and the versioned JSON model file."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import _kernels as K
from .dataset import Dataset, SeededRng
from .errors import ConfigError, DimensionError, NoNeighborsError, RankError, SchemaError
from .forest import Forest, ForestConfig, SplitRule, grow_forest
from .locallinear import _features
from .tuning import DEFAULT_LAMBDAS, select_features_lasso, tune_lambda_oob
from .variance import confidence_interval, little_bags_batch
from .weights import kernel_batch

FORMAT_VERSION = 1

# sub-stream ids of the model seed, kept apart from the forest's own streams
_LASSO_STREAM = 3


@dataclass(frozen=True)
class Prediction:
    mu: np.ndarray
    sigma2: Optional[np.ndarray] = None
    ci_lo: Optional[np.ndarray] = None
    ci_hi: Optional[np.ndarray] = None


def _fallback_mean(kb, Y):
    """Plain kernel average per test point, global mean where a point has no neighbors."""
    out = np.full(len(kb.indptr) - 1, float(np.mean(Y)))
    for t in range(len(out)):
        idx, w = kb.row(t)
        if idx.size:
            out[t] = float(w @ Y[idx])
    return out


@dataclass(eq=False)
class RegressionModel:
    """A grown forest plus the local regression settings used at prediction.

    ``selected_features`` lists the columns entering the local regression;
    ``None`` means every column, an empty array means none (the plain forest
    average).
    """

    forest: Forest
    data: Dataset
    lambda_predict: float
    selected_features: Optional[np.ndarray]
    tuning: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    kind = "regression"

    def predict(self, Xtest=None, ci_level: Optional[float] = None, strict: bool = False) -> Prediction:
        """Predict at ``Xtest``; ``None`` gives out-of-bag predictions on the training rows.

        Points without neighbors (or with a singular local system) fall back
        to the plain kernel average unless ``strict`` is set, in which case
        the error propagates. Where fewer than two little bags reach a point
        the variance is undefined and ``sigma2`` and the interval are NaN.
        """
        data = self.data
        if Xtest is None:
            Xt = data.features
            rows = np.arange(data.n)
        else:
            Xt = np.ascontiguousarray(np.atleast_2d(np.asarray(Xtest, np.float64)))
            rows = None
            if Xt.shape[1] != data.d:
                raise DimensionError(f"test points have {Xt.shape[1]} features, model expects {data.d}")
        kb = kernel_batch(self.forest, Xt, rows)
        feats = _features(self.selected_features, data.d)
        want = ci_level is not None
        mu, status, gamma = K.local_ridge_batch(kb.indptr, kb.indices, kb.weights,
                                                np.ascontiguousarray(data.features), data.responses,
                                                np.ascontiguousarray(Xt), feats,
                                                np.array([self.lambda_predict]), want)
        mu = mu[:, 0]
        bad = status != 0
        if np.any(bad):
            if strict:
                if np.any(status == 1):
                    raise NoNeighborsError(f"no neighbors for {int(np.sum(status == 1))} test point(s)")
                raise RankError(f"singular local system at {int(np.sum(status == 2))} test point(s)")
            mu = np.where(bad, _fallback_mean(kb, data.responses), mu)
        if not want:
            return Prediction(mu)
        sigma2, _ = little_bags_batch(self.forest, kb, gamma)
        lo, hi = confidence_interval(mu, sigma2, ci_level)
        return Prediction(mu, sigma2, lo, hi)

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "config": self.forest.config.to_dict(),
            "forest": self.forest.to_dict(),
            "training_data": _data_to_dict(self.data),
            "tuning": {
                "lambda_predict": self.lambda_predict,
                "selected_features": None if self.selected_features is None
                else [int(j) for j in self.selected_features],
                **{k: v for k, v in self.tuning.items() if k not in ("lambda_predict", "selected_features")},
            },
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionModel":
        _check_header(d, "regression")
        tun = dict(d["tuning"])
        sel = tun.pop("selected_features")
        lam = float(tun.pop("lambda_predict"))
        return cls(Forest.from_dict(d["forest"]), _data_from_dict(d["training_data"]), lam,
                   None if sel is None else np.asarray(sel, np.int64), tun, dict(d.get("provenance", {})))

    def save(self, path) -> None:
        save_model(self, path)


def _data_to_dict(data: Dataset) -> dict:
    return {
        "features": data.features.tolist(),
        "responses": data.responses.tolist(),
        "treatment": None if data.treatment is None else data.treatment.tolist(),
        "column_names": list(data.column_names),
    }


def _data_from_dict(d: dict) -> Dataset:
    return Dataset(np.asarray(d["features"], np.float64), np.asarray(d["responses"], np.float64),
                   None if d.get("treatment") is None else np.asarray(d["treatment"], np.float64),
                   tuple(d.get("column_names", ())))


def _check_header(d: dict, kind: str) -> None:
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise SchemaError(f"unsupported model format_version {version!r}; this build reads {FORMAT_VERSION}")
    if d.get("kind") != kind:
        raise SchemaError(f"model file holds a {d.get('kind')!r} model, expected {kind!r}")


def provenance(data: Dataset, seed: int) -> dict:
    return {"seed": int(seed), "fingerprint": data.fingerprint()}


FeatureSpec = Union[str, None, Sequence[int]]


def resolve_features(data: Dataset, spec: FeatureSpec, seed: int) -> Optional[np.ndarray]:
    """``"lasso"`` runs lasso selection, ``"all"``/``None`` keeps every column."""
    if isinstance(spec, str):
        if spec == "lasso":
            return select_features_lasso(data, rng=SeededRng(seed, _LASSO_STREAM))
        if spec == "all":
            return None
        raise ConfigError(f"unknown feature selection {spec!r}")
    if spec is None:
        return None
    return _features(spec, data.d)


def forest_candidates(config: ForestConfig, grid: Optional[dict], d: int) -> list:
    """Distinct resolved configs from ``config`` with every combination of ``grid`` values."""
    if not grid:
        return [config.resolved(d)]
    keys = sorted(grid)
    out = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cfg = replace(config, **dict(zip(keys, values))).resolved(d)
        if cfg not in out:
            out.append(cfg)
    return out


def _oob_rf_mse(forest, data) -> float:
    kb = kernel_batch(forest, data.features, np.arange(data.n))
    mu = _fallback_mean(kb, data.responses)
    return float(np.mean((mu - data.responses) ** 2))


def fit_llf(data: Dataset, config: ForestConfig = ForestConfig(), lambda_predict: Optional[float] = None,
            selected_features: FeatureSpec = "lasso", lambdas: Sequence[float] = DEFAULT_LAMBDAS,
            forest_grid: Optional[dict] = None, threads: Optional[int] = None) -> RegressionModel:
    """Grow a forest and set up local linear prediction.

    Without ``lambda_predict`` the penalty is chosen from ``lambdas`` by
    out-of-bag error on the grown forest. ``forest_grid`` maps config field
    names to candidate values (for example ``{"split_rule": ("ridge",
    "cart")}``); one forest is grown per combination and the one with the
    lowest out-of-bag error at its best penalty is kept.
    """
    feats = resolve_features(data, selected_features, config.seed)
    lams = [lambda_predict] if lambda_predict is not None else list(lambdas)
    best = None
    table = []
    for cfg in forest_candidates(config, forest_grid, data.d):
        forest = grow_forest(data, cfg, threads=threads)
        lam, mse = tune_lambda_oob(forest, data, feats, lams)
        score = float(np.min(mse))
        table.append({"split_rule": cfg.split_rule.value, "mtry": cfg.mtry,
                      "min_leaf_size": cfg.min_leaf_size, "lambda": lam, "oob_mse": score})
        if best is None or score < best[0]:
            best = (score, forest, lam, mse)
    _, forest, lam, mse = best
    tuning = {"method": "oob" if lambda_predict is None else "fixed",
              "lambda_candidates": [float(v) for v in lams], "oob_mse": [float(v) for v in mse]}
    if len(table) > 1:
        tuning["forest_table"] = table
    return RegressionModel(forest, data, float(lam), feats, tuning, provenance(data, config.seed))


def fit_rf(data: Dataset, config: ForestConfig = ForestConfig(), forest_grid: Optional[dict] = None,
           threads: Optional[int] = None) -> RegressionModel:
    """Plain honest regression forest: CART splits, prediction by kernel average.

    ``forest_grid`` works as in :func:`fit_llf`, scored by out-of-bag error
    of the kernel average.
    """
    base = replace(config, split_rule=SplitRule.CART)
    grid = {k: v for k, v in (forest_grid or {}).items() if k != "split_rule"}
    best = None
    table = []
    for cfg in forest_candidates(base, grid, data.d):
        forest = grow_forest(data, cfg, threads=threads)
        score = _oob_rf_mse(forest, data) if len(grid) else 0.0
        table.append({"mtry": cfg.mtry, "min_leaf_size": cfg.min_leaf_size, "oob_mse": score})
        if best is None or score < best[0]:
            best = (score, forest)
    tuning = {"method": "none"}
    if len(table) > 1:
        tuning = {"method": "oob", "forest_table": table}
    return RegressionModel(best[1], data, 0.0, np.zeros(0, np.int64), tuning, provenance(data, config.seed))


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path):
    """Read a regression or causal model file."""
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not a model file ({exc})") from None
    kind = d.get("kind")
    if kind == "regression":
        return RegressionModel.from_dict(d)
    if kind == "causal":
        from .causal import CausalModel
        return CausalModel.from_dict(d)
    raise SchemaError(f"{path}: unknown model kind {kind!r}")
