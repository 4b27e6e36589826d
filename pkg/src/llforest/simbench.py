"""Simulation designs, benchmark harnesses and reference rate formulas."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .dataset import Dataset, SeededRng, as_rng, write_csv
from .errors import ConfigError
from .forest import ForestConfig, SplitRule


class Design(str, Enum):
    BOUNDARY = "boundary"
    FRIEDMAN = "friedman"
    LINEAR_RAMP = "linear_ramp"
    STEP = "step"
    CAUSAL_1 = "causal1"
    CAUSAL_2 = "causal2"


MIN_DIM = {Design.BOUNDARY: 1, Design.FRIEDMAN: 5, Design.LINEAR_RAMP: 1, Design.STEP: 2,
           Design.CAUSAL_1: 2, Design.CAUSAL_2: 2}
DEFAULT_SIGMA = {Design.BOUNDARY: math.sqrt(20.0), Design.FRIEDMAN: 5.0, Design.LINEAR_RAMP: 0.0,
                 Design.STEP: 5.0, Design.CAUSAL_1: 1.0, Design.CAUSAL_2: 1.0}
CAUSAL_DESIGNS = (Design.CAUSAL_1, Design.CAUSAL_2)


@dataclass(frozen=True)
class SimSpec:
    design: Design
    n: int
    d: int
    sigma: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "design", Design(self.design))
        if self.sigma is None:
            object.__setattr__(self, "sigma", DEFAULT_SIGMA[self.design])
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        need = MIN_DIM[self.design]
        if self.d < need:
            raise ConfigError(f"design {self.design.value} needs d >= {need}, got d={self.d}")
        if self.sigma < 0:
            raise ConfigError("sigma must be nonnegative")

    @property
    def is_causal(self) -> bool:
        return self.design in CAUSAL_DESIGNS


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


def _ramp(X):
    d = X.shape[1]
    coef = np.array([10.0, 10.0, 5.0, 5.0] + [2.0] * 15)
    out = 20.0 * (X[:, 0] - 0.5) ** 3
    k = min(d, 20) - 1
    return out + X[:, 1:1 + k] @ coef[:k]


def truth(design: Design, X) -> np.ndarray:
    """Noise-free signal: the regression function, or the treatment effect for causal designs."""
    design = Design(design)
    X = np.atleast_2d(np.asarray(X, np.float64))
    if design is Design.BOUNDARY:
        return np.logaddexp(0.0, 6.0 * X[:, 0])
    if design is Design.FRIEDMAN:
        return (10 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20 * (X[:, 2] - 0.5) ** 2
                + 10 * X[:, 3] + 5 * X[:, 4])
    if design is Design.LINEAR_RAMP:
        return _ramp(X)
    if design is Design.STEP:
        return 10 * _logistic(10 * (X[:, 0] - 0.5)) + 5 * _logistic(10 * (X[:, 1] - 0.5))
    if design is Design.CAUSAL_1:
        z = 2 * _logistic(20 * (X[:, :2] - 1 / 3))
    else:
        z = 1 + _logistic(20 * (X[:, :2] - 1 / 3))
    return z[:, 0] * z[:, 1]


def generate(spec: SimSpec, rng=None) -> tuple[Dataset, np.ndarray]:
    """Draw ``X ~ U[0,1]^d`` and responses; returns the dataset and the truth vector.

    Causal designs are randomized trials: ``W ~ Bernoulli(0.5)`` and
    ``Y = W tau(X) + eps``. The returned truth is then ``tau(X)``.
    """
    gen = (as_rng(rng) if rng is not None else SeededRng(spec.seed)).generator(0)
    X = gen.random((spec.n, spec.d))
    signal = truth(spec.design, X)
    eps = spec.sigma * gen.standard_normal(spec.n)
    names = tuple(f"x{j + 1}" for j in range(spec.d))
    if spec.is_causal:
        W = (gen.random(spec.n) < 0.5).astype(np.float64)
        return Dataset(X, W * signal + eps, W, names), signal
    return Dataset(X, signal + eps, None, names), signal


# ---------------------------------------------------------------------------
# benchmarks

TABLE_COLUMNS = ("method", "d", "n", "sigma", "rmse", "coverage", "length")


@dataclass
class BenchResult:
    """Per-repeat rows plus the mean/sd summary over repeats."""

    per_repeat: list
    summary: list

    def summary_columns(self) -> dict:
        keys = list(TABLE_COLUMNS) + [k for k in self.summary[0] if k not in TABLE_COLUMNS]
        return {k: [row.get(k, "") for row in self.summary] for k in keys}

    def write_csv(self, path) -> None:
        write_csv(path, self.summary_columns())

    def mean(self, method: str, key: str = "rmse") -> float:
        for row in self.summary:
            if row["method"] == method:
                return row[key]
        raise KeyError(method)


def _seed_for(root: SeededRng, *key) -> int:
    return int(root.generator(*key).integers(2**62))


def _summarize(spec: SimSpec, rows: list, methods: Sequence[str], keys: Sequence[str]) -> list:
    out = []
    for m in methods:
        mine = [r for r in rows if r["method"] == m]
        row = {"method": m, "d": spec.d, "n": spec.n, "sigma": spec.sigma}
        for k in ("rmse", "coverage", "length"):
            row[k] = float(np.mean([r[k] for r in mine])) if k in keys else ""
        for k in keys:
            row[f"{k}_sd"] = float(np.std([r[k] for r in mine], ddof=1)) if len(mine) > 1 else 0.0
        row["repeats"] = len(mine)
        out.append(row)
    return out


def _draw_pair(spec: SimSpec, root: SeededRng, r: int, n_test: int):
    train, _ = generate(spec, SeededRng(_seed_for(root, 100, r)))
    test, truth_test = generate(replace(spec, n=n_test), SeededRng(_seed_for(root, 101, r)))
    return train, test, truth_test


def run_rmse_benchmark(spec: SimSpec, methods: Sequence[str] = ("RF", "LLF"), n_test: int = 1000,
                       repeats: int = 20, rng=None, config: ForestConfig = ForestConfig(num_trees=500),
                       threads: Optional[int] = None, tune_forest: bool = True) -> BenchResult:
    """Test-set RMSE against the truth for the plain forest and the local linear forest.

    ``RF`` is an honest CART forest predicting by kernel average. ``LLF``
    selects regression features by lasso, and picks the split rule and the
    penalty by out-of-bag error (``LLF_RIDGE`` and ``LLF_CART`` fix the
    rule). With ``tune_forest`` both methods consider all ``d`` variables
    at every split and LLF picks its split rule by out-of-bag error;
    otherwise ``config`` is used as given.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    if spec.is_causal:
        raise ConfigError("use run_causal_benchmark for causal designs")
    root = as_rng(rng) if rng is not None else SeededRng(spec.seed)
    rows = []
    for r in range(repeats):
        train, test, mu = _draw_pair(spec, root, r, n_test)
        cfg = replace(config, seed=_seed_for(root, 102, r))
        for m in methods:
            model = _fit_method(m, train, cfg, threads, tune_forest)
            pred = model.predict(test.features).mu
            rows.append({"method": m, "repeat": r, "rmse": float(np.sqrt(np.mean((pred - mu) ** 2)))})
    return BenchResult(rows, _summarize(spec, rows, methods, ("rmse",)))


def default_forest_grid(d: int) -> dict:
    """Forest settings used by the benchmarks: every variable is a split candidate."""
    return {"mtry": (d,)}


def _fit_method(m, train, cfg, threads, tune_forest):
    from .model import fit_llf, fit_rf

    grid = default_forest_grid(train.d) if tune_forest else {}
    if m == "RF":
        return fit_rf(train, cfg, forest_grid=grid, threads=threads)
    if m == "LLF":
        rules = {"split_rule": (SplitRule.RIDGE_RESIDUAL, SplitRule.CART)} if tune_forest else {}
        return fit_llf(train, cfg, forest_grid={**grid, **rules}, threads=threads)
    if m == "LLF_RIDGE":
        return fit_llf(train, replace(cfg, split_rule=SplitRule.RIDGE_RESIDUAL), forest_grid=grid, threads=threads)
    if m == "LLF_CART":
        return fit_llf(train, replace(cfg, split_rule=SplitRule.CART), forest_grid=grid, threads=threads)
    raise ConfigError(f"unknown method {m!r}; choose from RF, LLF, LLF_RIDGE, LLF_CART")


def run_coverage_benchmark(spec: SimSpec, level: float = 0.95, repeats: int = 20, rng=None,
                           methods: Sequence[str] = ("RF", "LLF"),
                           config: ForestConfig = ForestConfig(num_trees=500),
                           threads: Optional[int] = None, tune_forest: bool = True) -> BenchResult:
    """Out-of-bag interval coverage of the true signal on the training points."""
    if not 0.0 < level < 1.0:
        raise ConfigError("level must lie in (0, 1)")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    root = as_rng(rng) if rng is not None else SeededRng(spec.seed)
    rows = []
    for r in range(repeats):
        train, mu = generate(spec, SeededRng(_seed_for(root, 100, r)))
        cfg = replace(config, seed=_seed_for(root, 102, r))
        for m in methods:
            model = _fit_method(m, train, cfg, threads, tune_forest)
            p = model.predict(None, ci_level=level)
            rows.append({
                "method": m, "repeat": r,
                "rmse": float(np.sqrt(np.mean((p.mu - mu) ** 2))),
                "coverage": float(np.mean((p.ci_lo <= mu) & (mu <= p.ci_hi))),
                # rows without a defined interval count as not covered and carry no length
                "length": float(np.nanmean(p.ci_hi - p.ci_lo)),
            })
    return BenchResult(rows, _summarize(spec, rows, methods, ("rmse", "coverage", "length")))


def run_causal_benchmark(spec: SimSpec, methods: Sequence[str] = ("CF", "LLCF"), n_test: int = 2000,
                         repeats: int = 20, rng=None, config: ForestConfig = ForestConfig(num_trees=500),
                         threads: Optional[int] = None, tune_forest: bool = True) -> BenchResult:
    """Test-set RMSE of the treatment effect for the causal forest and its local linear version.

    With ``tune_forest`` every forest (nuisance and effect) considers all
    ``d`` variables at each split and LLCF picks its split rule by the
    out-of-bag R-learner loss.
    """
    from .causal import estimate_nuisances, fit_cf, fit_llcf

    if not spec.is_causal:
        raise ConfigError("run_causal_benchmark needs a causal design")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    root = as_rng(rng) if rng is not None else SeededRng(spec.seed)
    rows = []
    for r in range(repeats):
        train, test, tau = _draw_pair(spec, root, r, n_test)
        cfg = replace(config, seed=_seed_for(root, 102, r))
        if tune_forest:
            cfg = replace(cfg, mtry=spec.d)
        nuis = estimate_nuisances(train, cfg, threads=threads)
        for m in methods:
            if m == "CF":
                model = fit_cf(train, nuis, cfg, threads=threads)
            elif m == "LLCF":
                grid = {"split_rule": (SplitRule.RIDGE_RESIDUAL, SplitRule.CART)} if tune_forest else None
                model = fit_llcf(train, nuis, cfg, forest_grid=grid, threads=threads)
            else:
                raise ConfigError(f"unknown method {m!r}; choose from CF, LLCF")
            pred = model.predict_tau(test.features)
            rows.append({"method": m, "repeat": r, "rmse": float(np.sqrt(np.mean((pred - tau) ** 2)))})
    return BenchResult(rows, _summarize(spec, rows, methods, ("rmse",)))


# ---------------------------------------------------------------------------
# reference rates

class OutOfRegimeWarning(UserWarning):
    """Parameters fall outside the regime where the rate result applies."""


@dataclass(frozen=True)
class TheoryParams:
    d: int
    omega: float = 0.2
    pi: float = 1.0
    min_leaf: int = 5
    beta: Optional[float] = None
    s: Optional[float] = None
    n: Optional[int] = None

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if not 0.0 < self.omega < 0.5:
            raise ConfigError("omega must lie in (0, 0.5)")
        if not 0.0 < self.pi <= 1.0:
            raise ConfigError("pi must lie in (0, 1]")
        if self.min_leaf < 1:
            raise ConfigError("min_leaf must be >= 1")

    @property
    def split_ratio(self) -> float:
        """``log(1/omega) / log(1/(1 - omega))``."""
        return math.log(1.0 / self.omega) / math.log(1.0 / (1.0 - self.omega))


def beta_rf(params: TheoryParams) -> float:
    """Smallest subsampling exponent for the plain forest's rate."""
    return 1.0 - 1.0 / (1.0 + params.d / params.pi * params.split_ratio)


def beta_min_llf(params: TheoryParams) -> float:
    """Smallest subsampling exponent for the local linear forest; warns when omega > 0.2."""
    if params.omega > 0.2:
        warnings.warn(f"omega={params.omega} is above 0.2, outside the regime of the rate result",
                      OutOfRegimeWarning, stacklevel=2)
    return 1.0 - 1.0 / (1.0 + params.d / (1.56 * params.pi) * params.split_ratio)


def theoretical_lambda(params: TheoryParams) -> float:
    """Theta-rate reference penalty with unit constant.

    ``d sqrt(s/n) (s/(2k-1))^(-1.56 (pi/d) / split_ratio)``. ``s`` defaults
    to ``n ** beta``.
    """
    if params.n is None:
        raise ConfigError("theoretical_lambda needs n")
    s = params.s
    if s is None:
        if params.beta is None:
            raise ConfigError("theoretical_lambda needs s or beta")
        s = params.n ** params.beta
    if s > params.n:
        raise ConfigError(f"subsample size s={s} exceeds n={params.n}")
    expo = 1.56 * (params.pi / params.d) / params.split_ratio
    return params.d * math.sqrt(s / params.n) * (s / (2 * params.min_leaf - 1)) ** (-expo)
