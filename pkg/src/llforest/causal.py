"""Local linear causal forests for conditional average treatment effects.

Outcome and treatment are first residualized on out-of-bag estimates of
``m(x) = E[Y | X = x]`` and ``e(x) = P[W = 1 | X = x]``. A forest grown on
the treatment-effect gradient pseudo-outcome then supplies weights for a
local regression of the outcome residual on the treatment residual, with
ridge-penalized slopes in ``x`` for both the effect and the intercept.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .dataset import Dataset
from .errors import ConfigError, NoNeighborsError, OverlapError, RankError
from .forest import Forest, ForestConfig, SplitRule, grow_forest
from .locallinear import _features
from .model import (FORMAT_VERSION, FeatureSpec, _check_header, _data_from_dict, _data_to_dict, provenance,
                    resolve_features)
from .tuning import DEFAULT_LAMBDAS, r_learner_error, tune_lambda_oob
from .weights import kernel_batch

E_CLAMP = (0.01, 0.99)
DEFAULT_CAUSAL_LAMBDAS = (0.01, 0.1, 1.0, 10.0, 100.0)
PLAIN_LAMBDA = 1e12

# seed offsets for the nuisance forests, so they never share trees with the effect forest
_M_SEED, _E_SEED = 1_000_003, 2_000_003


@dataclass(frozen=True)
class NuisanceEstimates:
    m_hat: np.ndarray
    e_hat: np.ndarray
    lambda_m: float = float("nan")
    lambda_e: float = float("nan")

    def __post_init__(self):
        if self.m_hat.shape != self.e_hat.shape:
            raise ValueError("m_hat and e_hat must have the same length")
        if np.any(self.e_hat <= 0) or np.any(self.e_hat >= 1):
            raise ValueError("e_hat must lie strictly inside (0, 1)")


def _oob_llf(data: Dataset, responses, config: ForestConfig, lambdas, threads):
    d = data.with_responses(responses)
    forest = grow_forest(d, config, threads=threads)
    kb = kernel_batch(forest, d.features, np.arange(d.n))
    lam, _ = tune_lambda_oob(forest, d, None, lambdas, kernel=kb)
    mu, status, _ = K.local_ridge_batch(kb.indptr, kb.indices, kb.weights, np.ascontiguousarray(d.features),
                                        d.responses, np.ascontiguousarray(d.features), np.arange(d.d),
                                        np.array([lam]), False)
    mu = mu[:, 0]
    bad = status != 0
    if np.any(bad):
        # rows that every tree saw get the out-of-sample grand mean
        mu[bad] = float(np.mean(d.responses))
    return mu, lam


def estimate_nuisances(data: Dataset, config: ForestConfig = ForestConfig(num_trees=500),
                       lambdas: Sequence[float] = DEFAULT_LAMBDAS, threads: Optional[int] = None) -> NuisanceEstimates:
    """Out-of-bag local linear forest estimates of ``m`` and ``e``.

    Both regressions use all columns with the penalty chosen by out-of-bag
    error. ``e_hat`` is clamped to ``[0.01, 0.99]``.
    """
    if data.treatment is None:
        raise ConfigError("causal estimation needs a treatment column")
    W = data.treatment
    if np.all(W == 1) or np.all(W == 0):
        raise OverlapError("overlap violated: every unit has the same treatment")
    m_hat, lam_m = _oob_llf(data, data.responses, replace(config, seed=config.seed + _M_SEED), lambdas, threads)
    e_raw, lam_e = _oob_llf(data, W, replace(config, seed=config.seed + _E_SEED), lambdas, threads)
    return NuisanceEstimates(m_hat, np.clip(e_raw, *E_CLAMP), lam_m, lam_e)


@dataclass(eq=False)
class CausalModel:
    forest: Forest
    data: Dataset
    nuisances: NuisanceEstimates
    lambda_tau: float
    lambda_a: float
    selected_features: Optional[np.ndarray]
    tuning: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    kind = "causal"

    def __post_init__(self):
        if self.lambda_tau < 0 or self.lambda_a < 0:
            raise ConfigError("lambda_tau and lambda_a must be nonnegative")

    @property
    def y_res(self) -> np.ndarray:
        return self.data.responses - self.nuisances.m_hat

    @property
    def w_res(self) -> np.ndarray:
        return self.data.treatment - self.nuisances.e_hat

    def predict_tau(self, Xtest=None, strict: bool = False) -> np.ndarray:
        """Treatment effect at each row of ``Xtest`` (out-of-bag on the training rows if ``None``)."""
        tau, status = self._solve(Xtest, np.array([self.lambda_tau]), np.array([self.lambda_a]))
        tau = tau[:, 0]
        bad = status != 0
        if np.any(bad):
            if strict:
                if np.any(status == 1):
                    raise NoNeighborsError(f"no neighbors for {int(np.sum(status == 1))} test point(s)")
                raise RankError("singular local system; use larger lambda_tau / lambda_a")
            plain, pst = self._solve(Xtest, np.array([PLAIN_LAMBDA]), np.array([PLAIN_LAMBDA]))
            fallback = np.where(pst == 0, plain[:, 0], self._global_tau())
            tau = np.where(bad, fallback, tau)
        return tau

    def _global_tau(self) -> float:
        w, y = self.w_res, self.y_res
        return float(np.sum(w * y) / np.sum(w * w))

    def _solve(self, Xtest, lam_tau, lam_a, kernel=None):
        if Xtest is None:
            Xt, rows = self.data.features, np.arange(self.data.n)
        else:
            Xt, rows = np.atleast_2d(np.asarray(Xtest, np.float64)), None
        if kernel is None:
            kernel = kernel_batch(self.forest, Xt, rows)
        feats = _features(self.selected_features, self.data.d)
        return K.causal_ridge_batch(kernel.indptr, kernel.indices, kernel.weights,
                                    np.ascontiguousarray(self.data.features), self.y_res, self.w_res,
                                    np.ascontiguousarray(Xt), feats, np.asarray(lam_tau, np.float64),
                                    np.asarray(lam_a, np.float64))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "config": self.forest.config.to_dict(),
            "forest": self.forest.to_dict(),
            "training_data": _data_to_dict(self.data),
            "tuning": {
                "selected_features": None if self.selected_features is None
                else [int(j) for j in self.selected_features],
                **self.tuning,
            },
            "causal": {
                "lambda_tau": self.lambda_tau,
                "lambda_a": self.lambda_a,
                "m_hat": self.nuisances.m_hat.tolist(),
                "e_hat": self.nuisances.e_hat.tolist(),
                "lambda_m": self.nuisances.lambda_m,
                "lambda_e": self.nuisances.lambda_e,
            },
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CausalModel":
        _check_header(d, "causal")
        c = d["causal"]
        tun = dict(d["tuning"])
        sel = tun.pop("selected_features")
        nuis = NuisanceEstimates(np.asarray(c["m_hat"], np.float64), np.asarray(c["e_hat"], np.float64),
                                 float(c["lambda_m"]), float(c["lambda_e"]))
        return cls(Forest.from_dict(d["forest"]), _data_from_dict(d["training_data"]), nuis,
                   float(c["lambda_tau"]), float(c["lambda_a"]),
                   None if sel is None else np.asarray(sel, np.int64), tun, dict(d.get("provenance", {})))

    def save(self, path) -> None:
        from .model import save_model
        save_model(self, path)


def _check_nuisances(data: Dataset, nuis: NuisanceEstimates):
    if data.treatment is None:
        raise ConfigError("causal estimation needs a treatment column")
    if nuis.m_hat.shape != (data.n,):
        raise ConfigError("nuisance estimates do not match the data")


def _grow_effect_forest(data, nuis, config, threads):
    y_res = data.responses - nuis.m_hat
    w_res = data.treatment - nuis.e_hat
    return grow_forest(data, config, responses_override=y_res, treatment_residuals=w_res, threads=threads)


def fit_llcf(data: Dataset, nuisances: NuisanceEstimates, config: ForestConfig = ForestConfig(num_trees=500),
             lambda_tau: Optional[float] = None, lambda_a: Optional[float] = None,
             lambda_grid: Sequence[float] = DEFAULT_CAUSAL_LAMBDAS, selected_features: FeatureSpec = "lasso",
             forest_grid: Optional[dict] = None, threads: Optional[int] = None) -> CausalModel:
    """Grow the effect forest and choose ``(lambda_tau, lambda_a)`` by the R-learner loss.

    Every pair from ``lambda_grid`` x ``lambda_grid`` is scored on
    out-of-bag effect predictions; ties go to the smaller ``lambda_tau``
    and then the smaller ``lambda_a``. A penalty passed explicitly is held
    fixed. ``forest_grid`` maps config fields to candidate values; one
    forest is grown per combination and the lowest loss wins.
    """
    from .model import forest_candidates

    _check_nuisances(data, nuisances)
    feats = resolve_features(data, selected_features, config.seed)
    taus = [lambda_tau] if lambda_tau is not None else list(lambda_grid)
    alphas = [lambda_a] if lambda_a is not None else list(lambda_grid)
    pairs = list(itertools.product(taus, alphas))
    best = None
    table = []
    for cfg in forest_candidates(config, forest_grid, data.d):
        forest = _grow_effect_forest(data, nuisances, cfg, threads)
        model = CausalModel(forest, data, nuisances, 0.0, 0.0, feats, {}, provenance(data, config.seed))
        errs = _r_losses(model, pairs)
        k = min(range(len(pairs)), key=lambda j: (errs[j], pairs[j][0], pairs[j][1]))
        table.append({"split_rule": cfg.split_rule.value, "mtry": cfg.mtry, "lambda_tau": float(pairs[k][0]),
                      "lambda_a": float(pairs[k][1]), "r_loss": float(errs[k])})
        if best is None or errs[k] < best[0]:
            best = (errs[k], model, k, errs)
    _, model, k, errs = best
    model.lambda_tau, model.lambda_a = float(pairs[k][0]), float(pairs[k][1])
    model.tuning = {"method": "r_learner_oob",
                    "pairs": [[float(a), float(b)] for a, b in pairs],
                    "r_loss": [float(e) for e in errs]}
    if len(table) > 1:
        model.tuning["forest_table"] = table
    return model


def _r_losses(model: CausalModel, pairs) -> np.ndarray:
    data, nuis = model.data, model.nuisances
    tau, status = model._solve(None, [p[0] for p in pairs], [p[1] for p in pairs])
    ok = status == 0
    errs = []
    for k in range(len(pairs)):
        t = tau[ok, k]
        errs.append(r_learner_error(data.responses[ok], nuis.m_hat[ok], nuis.e_hat[ok], t, data.treatment[ok])
                    if np.all(np.isfinite(t)) else np.inf)
    return np.asarray(errs)


def fit_cf(data: Dataset, nuisances: NuisanceEstimates, config: ForestConfig = ForestConfig(num_trees=500),
           threads: Optional[int] = None) -> CausalModel:
    """Plain orthogonalized causal forest: CART splits on the pseudo-outcome, no local slopes."""
    _check_nuisances(data, nuisances)
    cfg = replace(config, split_rule=SplitRule.CART)
    forest = _grow_effect_forest(data, nuisances, cfg, threads)
    return CausalModel(forest, data, nuisances, PLAIN_LAMBDA, PLAIN_LAMBDA, np.zeros(0, np.int64),
                       {"method": "none"}, provenance(data, cfg.seed))


def predict_tau(model: CausalModel, x0) -> float:
    """Treatment effect at a single point."""
    return float(model.predict_tau(np.asarray(x0, np.float64).reshape(1, -1), strict=True)[0])


def transformed_outcome_error(test: Dataset, tau_hat, S0: Optional[float] = None):
    """Mean of ``((2W - 1) Y - tau_hat)^2``; with ``S0`` also returns that value minus ``S0``."""
    if test.treatment is None:
        raise ConfigError("transformed outcome needs a treatment column")
    tau_hat = np.asarray(tau_hat, np.float64).ravel()
    proxy = (2 * test.treatment - 1) * test.responses
    raw = float(np.mean((proxy - tau_hat) ** 2))
    if S0 is None:
        return raw
    return raw, raw - float(S0)
