"""Cross-validation of forest and ridge parameters, and lasso feature selection."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numba import njit

from . import _kernels as K
from .dataset import Dataset, as_rng
from .errors import ConfigError, SizeError
from .forest import ForestConfig, grow_forest
from .locallinear import _features
from .weights import kernel_batch

DEFAULT_LAMBDAS = tuple(float(v) for v in np.logspace(-3, 2, 10))
REFERENCE_LAMBDA = 1e12


@dataclass(frozen=True)
class TuningGrid:
    lambda_predict_candidates: tuple = DEFAULT_LAMBDAS
    mtry_candidates: tuple = (None,)
    min_leaf_candidates: tuple = (5,)
    subsample_fraction_candidates: tuple = (0.5,)
    folds: int = 5

    def __post_init__(self):
        for name in ("lambda_predict_candidates", "mtry_candidates", "min_leaf_candidates",
                     "subsample_fraction_candidates"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"{name} is empty")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if any(lam <= 0 for lam in self.lambda_predict_candidates):
            raise ConfigError("lambda candidates must be positive")


@dataclass
class CVResult:
    config: ForestConfig
    lambda_predict: float
    table: list = field(default_factory=list)

    def table_columns(self) -> dict:
        keys = ["mtry", "min_leaf_size", "subsample_fraction", "lambda", "reference", "cv_mse"]
        return {k: [row[k] for row in self.table] for k in keys}


# ---------------------------------------------------------------------------
# lasso

@njit(cache=True, nogil=True)
def _cd_path(G, c, lambdas, max_sweeps, tol):
    """Covariance-form cyclic coordinate descent along a decreasing path."""
    d = G.shape[0]
    beta = np.zeros(d)
    grad = c.copy()  # c - G beta
    out = np.zeros((lambdas.shape[0], d))
    for li in range(lambdas.shape[0]):
        lam = lambdas[li]
        for _ in range(max_sweeps):
            delta_max = 0.0
            for j in range(d):
                gjj = G[j, j]
                if gjj <= 0.0:
                    continue
                z = grad[j] + gjj * beta[j]
                if z > lam:
                    new = (z - lam) / gjj
                elif z < -lam:
                    new = (z + lam) / gjj
                else:
                    new = 0.0
                diff = new - beta[j]
                if diff != 0.0:
                    for k in range(d):
                        grad[k] -= G[k, j] * diff
                    beta[j] = new
                    step = abs(diff) * np.sqrt(gjj)
                    if step > delta_max:
                        delta_max = step
            if delta_max < tol:
                break
        out[li] = beta
    return out


def _standardize(X, y, w):
    w = w / w.sum()
    xm = w @ X
    xs = np.sqrt(w @ (X - xm) ** 2)
    keep = xs > 1e-12 * np.maximum(1.0, np.abs(xm))
    Z = np.zeros_like(X)
    Z[:, keep] = (X[:, keep] - xm[keep]) / xs[keep]
    ym = w @ y
    return Z, y - ym, w, xm, xs, ym, keep


def lasso_path(X, y, lambdas, sample_weight=None, max_sweeps: int = 1000, tol: float = 1e-7):
    """Lasso coefficients on standardized columns for each penalty.

    Minimizes ``0.5 * sum_i w_i (y_i - b0 - z_i b)^2 / sum w + lam |b|_1`` with
    ``z`` the weighted-standardized features. Returns coefficients on the
    standardized scale, shape ``(len(lambdas), d)``, and the centering
    needed to predict on the raw scale.
    """
    X = np.asarray(X, np.float64)
    y = np.asarray(y, np.float64)
    w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, np.float64)
    Z, yc, w, xm, xs, ym, keep = _standardize(X, y, w)
    Zw = Z * w[:, None]
    G = Zw.T @ Z
    c = Zw.T @ yc
    coefs = _cd_path(G, c, np.asarray(lambdas, np.float64), max_sweeps, tol)
    coefs[:, ~keep] = 0.0
    return coefs, (xm, np.where(keep, xs, 1.0), ym)


def _lambda_max(X, y, w=None):
    w = np.ones(len(y)) if w is None else w
    Z, yc, w, *_ = _standardize(np.asarray(X, np.float64), np.asarray(y, np.float64), w)
    return float(np.max(np.abs((Z * w[:, None]).T @ yc)))


def default_penalty_path(X, y, sample_weight=None, n_lambda: int = 50, ratio: float = 1e-3) -> np.ndarray:
    lmax = _lambda_max(X, y, sample_weight)
    if lmax <= 0:
        return np.array([1.0])
    return lmax * np.logspace(0, np.log10(ratio), n_lambda)


def select_features_lasso(data: Dataset, penalty_path: Optional[Sequence[float]] = None, rng=None,
                          folds: int = 5, sample_weight=None, responses=None) -> np.ndarray:
    """Columns with nonzero lasso coefficients at the cross-validated penalty.

    The penalty is the largest one whose CV error is within one standard
    error of the minimum. If nothing survives, the single column with the
    largest absolute correlation with the response is returned instead.
    """
    X = data.features
    y = data.responses if responses is None else np.asarray(responses, np.float64)
    n, d = X.shape
    if d == 1:
        return np.array([0])
    if n <= 2:
        raise SizeError("lasso selection needs more than 2 rows")
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, np.float64)
    path = np.sort(np.asarray(penalty_path if penalty_path is not None else default_penalty_path(X, y, w), np.float64))[::-1]
    gen = as_rng(rng).generator(7)
    k = min(folds, n)
    fold = np.empty(n, np.int64)
    fold[gen.permutation(n)] = np.arange(n) % k
    err = np.zeros((k, len(path)))
    for f in range(k):
        tr, te = fold != f, fold == f
        coefs, (xm, xs, ym) = lasso_path(X[tr], y[tr], path, w[tr])
        pred = ym + ((X[te] - xm) / xs) @ coefs.T
        err[f] = np.average((y[te, None] - pred) ** 2, axis=0, weights=w[te])
    mean = err.mean(axis=0)
    se = err.std(axis=0, ddof=1) / np.sqrt(k)
    best = int(np.argmin(mean))
    ok = np.flatnonzero(mean <= mean[best] + se[best])
    chosen = path[ok.min()]  # path is decreasing, so the smallest index is the largest penalty
    coefs, _ = lasso_path(X, y, [chosen], w)
    sel = np.flatnonzero(np.abs(coefs[0]) > 0)
    if sel.size == 0:
        Z, yc, *_ = _standardize(X, y, w)
        sel = np.array([int(np.argmax(np.abs(Z.T @ (w * yc))))])
    return sel


# ---------------------------------------------------------------------------
# ridge penalty and forest parameters

def _fold_predictions(forest, train: Dataset, Xtest, lambdas, feats) -> np.ndarray:
    kb = kernel_batch(forest, Xtest)
    f = _features(feats, train.d)
    mu, status, _ = K.local_ridge_batch(kb.indptr, kb.indices, kb.weights, np.ascontiguousarray(train.features),
                                        train.responses, np.ascontiguousarray(Xtest), f,
                                        np.asarray(lambdas, np.float64), False)
    bad = status != 0
    if np.any(bad) or np.any(~np.isfinite(mu)):
        # degenerate local systems fall back to the plain weighted mean
        mean, _, _ = K.local_ridge_batch(kb.indptr, kb.indices, kb.weights, np.ascontiguousarray(train.features),
                                         train.responses, np.ascontiguousarray(Xtest), np.zeros(0, np.int64),
                                         np.zeros(1), False)
        fallback = np.where(np.isfinite(mean[:, 0]), mean[:, 0], train.responses.mean())
        mu = np.where(np.isfinite(mu), mu, fallback[:, None])
    return mu


def _tie_tol(y) -> float:
    return 1e-10 * max(float(np.mean(np.asarray(y) ** 2)), 1e-300)


def cross_validate(data: Dataset, grid: TuningGrid = TuningGrid(), rng=None,
                   base_config: ForestConfig = ForestConfig(num_trees=500),
                   selected_features=None, threads: Optional[int] = None) -> CVResult:
    """K-fold CV over forest parameters and the prediction penalty.

    Every forest-parameter combination is refit on each training fold; all
    penalties are scored on the same fold predictions. A reference row at
    ``lambda = 1e12`` (the plain forest limit) is added for every
    combination but never selected. Ties within a relative 1e-10 go to the
    smallest penalty, then the smallest leaf size.
    """
    n = data.n
    if n < 2 * grid.folds:
        raise SizeError(f"need at least {2 * grid.folds} rows for {grid.folds}-fold CV, got {n}")
    root = as_rng(rng)
    gen = root.generator(11)
    fold = np.empty(n, np.int64)
    fold[gen.permutation(n)] = np.arange(n) % grid.folds
    lambdas = list(grid.lambda_predict_candidates) + [REFERENCE_LAMBDA]
    table = []
    combos = list(itertools.product(grid.mtry_candidates, grid.min_leaf_candidates,
                                    grid.subsample_fraction_candidates))
    for ci, (mtry, leaf, frac) in enumerate(combos):
        cfg = replace(base_config, mtry=mtry, min_leaf_size=int(leaf), subsample_fraction=float(frac))
        if cfg.mtry is not None and cfg.mtry > data.d:
            continue
        sq = np.zeros(len(lambdas))
        for f in range(grid.folds):
            tr, te = np.flatnonzero(fold != f), np.flatnonzero(fold == f)
            train = data.subset(tr)
            fcfg = replace(cfg, seed=int(root.generator(12, ci, f).integers(2**63)))
            forest = grow_forest(train, fcfg, threads=threads)
            mu = _fold_predictions(forest, train, data.features[te], lambdas, selected_features)
            sq += np.sum((mu - data.responses[te, None]) ** 2, axis=0)
        resolved = cfg.resolved(data.d)
        for lam, s in zip(lambdas, sq):
            table.append({"mtry": resolved.mtry, "min_leaf_size": int(leaf), "subsample_fraction": float(frac),
                          "lambda": float(lam), "reference": lam == REFERENCE_LAMBDA, "cv_mse": float(s / n),
                          "_config": cfg})
    if not table:
        raise ConfigError("no admissible grid point")
    best = _argmin(table, _tie_tol(data.responses))
    return CVResult(best["_config"], best["lambda"], [{k: v for k, v in r.items() if k != "_config"} for r in table])


def _argmin(rows, tol):
    cands = [r for r in rows if not r["reference"]]
    low = min(r["cv_mse"] for r in cands)
    near = [r for r in cands if r["cv_mse"] <= low * (1 + 1e-9) + tol]
    return min(near, key=lambda r: (r["lambda"], r["min_leaf_size"], r["mtry"], r["subsample_fraction"]))


def tune_lambda_oob(forest, data: Dataset, selected_features=None, lambdas=DEFAULT_LAMBDAS,
                    kernel=None) -> tuple[float, np.ndarray]:
    """Pick the prediction penalty by out-of-bag error on one fitted forest.

    The forest kernel does not depend on the penalty, so every candidate is
    scored on the same OOB weights. Returns ``(best_lambda, oob_mse)``.
    """
    lambdas = np.asarray(lambdas, np.float64)
    if kernel is None:
        kernel = kernel_batch(forest, data.features, np.arange(data.n))
    keep = np.diff(kernel.indptr) > 0
    f = _features(selected_features, data.d)
    mu, status, _ = K.local_ridge_batch(kernel.indptr, kernel.indices, kernel.weights,
                                        np.ascontiguousarray(data.features), data.responses,
                                        np.ascontiguousarray(data.features), f, lambdas, False)
    ok = keep & (status == 0)
    mse = np.array([np.mean((mu[ok, l] - data.responses[ok]) ** 2) for l in range(len(lambdas))])
    mse = np.where(np.isfinite(mse), mse, np.inf)
    tol = _tie_tol(data.responses)
    best = int(np.flatnonzero(mse <= mse.min() * (1 + 1e-9) + tol)[0])
    return float(lambdas[best]), mse


def r_learner_error(Y, m_hat, e_hat, tau_hat, W) -> float:
    """``sum_i (Y_i - m_i - tau_i (W_i - e_i))^2``."""
    arrs = [np.asarray(a, np.float64).ravel() for a in (Y, m_hat, e_hat, tau_hat, W)]
    if len({a.shape[0] for a in arrs}) != 1:
        raise ValueError("all inputs must have the same length")
    Y, m, e, tau, W = arrs
    return float(np.sum((Y - m - tau * (W - e)) ** 2))
