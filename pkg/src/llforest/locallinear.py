"""Ridge-penalized local linear regression on forest weights.

At a test point ``x0`` with kernel weights ``alpha`` the estimator solves

    min_{mu, theta}  sum_i alpha_i (Y_i - mu - (X_i - x0) theta)^2 + lam ||theta||^2

whose solution is ``(D' A D + lam J)^{-1} D' A Y`` with ``D = [1, X - x0]``
and ``J = diag(0, 1, ..., 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from . import _kernels as K
from .dataset import Dataset
from .errors import DimensionError, NoNeighborsError, RankError
from .forest import Forest
from .weights import KernelBatch, WeightVector, forest_weights, kernel_batch


@dataclass(frozen=True)
class LocalDesign:
    indices: np.ndarray
    delta: np.ndarray
    alpha: np.ndarray
    penalty: np.ndarray
    lam: float
    features: np.ndarray
    x0: np.ndarray

    @property
    def n_eff(self) -> int:
        return len(self.indices)

    def system_matrix(self) -> np.ndarray:
        D = self.delta
        return D.T @ (self.alpha[:, None] * D) + self.lam * np.diag(self.penalty)


@dataclass(frozen=True)
class LocalFit:
    mu_hat: float
    theta_hat: np.ndarray
    M_lambda: np.ndarray
    zeta: np.ndarray
    gamma: np.ndarray
    design: LocalDesign

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate([[self.mu_hat], self.theta_hat])


def _features(selected, d: int) -> np.ndarray:
    if selected is None:
        return np.arange(d)
    f = np.asarray(sorted(set(int(j) for j in selected)), dtype=np.int64)
    if f.size and (f.min() < 0 or f.max() >= d):
        raise DimensionError(f"selected features {f.tolist()} out of range for d={d}")
    return f


def build_design(data: Dataset, weights: WeightVector, x0, selected_features=None,
                 lam: float = 0.0) -> LocalDesign:
    """Centered design ``[1, X_i - x0]`` on the support of the weights.

    ``selected_features=None`` uses every column; an empty selection leaves
    only the intercept, which reproduces the plain forest average.
    """
    x0 = np.asarray(x0, np.float64).ravel()
    if x0.shape[0] != data.d:
        raise DimensionError(f"x0 has {x0.shape[0]} entries, data has d={data.d}")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    keep = weights.weights > 0
    idx = np.asarray(weights.indices)[keep]
    if idx.size == 0:
        raise NoNeighborsError("no neighbors: every forest weight is zero at this point")
    feats = _features(selected_features, data.d)
    D = np.ones((idx.size, feats.size + 1))
    D[:, 1:] = data.features[np.ix_(idx, feats)] - x0[feats]
    pen = np.ones(feats.size + 1)
    pen[0] = 0.0
    return LocalDesign(idx, D, np.asarray(weights.weights)[keep], pen, float(lam), feats, x0)


def _aligned(design: LocalDesign, responses) -> np.ndarray:
    # a full-length vector whose size equals the support means the support is every row
    y = np.asarray(responses, np.float64).ravel()
    return y if y.shape[0] == design.n_eff else y[design.indices]


def solve_local_ridge(design: LocalDesign, responses) -> LocalFit:
    """Solve the normal equations by Cholesky factorization.

    ``responses`` may be the full training vector or already restricted to
    the design rows. A failed factorization is retried once with a 1e-12
    diagonal jitter before giving up with :class:`RankError`.
    """
    y = _aligned(design, responses)
    D, a = design.delta, design.alpha
    M = design.system_matrix()
    rhs = D.T @ (a * y)
    p = M.shape[0]
    if design.lam == 0.0 and p > 1 and np.linalg.cond(M) > 1e12:
        raise RankError("weighted design is rank deficient at lambda=0; use lambda > 0")
    try:
        cf = linalg.cho_factor(M, lower=True)
    except linalg.LinAlgError:
        jitter = 1e-12 * max(1.0, float(np.max(np.abs(np.diag(M)))))
        try:
            cf = linalg.cho_factor(M + jitter * np.eye(p), lower=True)
        except linalg.LinAlgError:
            raise RankError("local system is singular; use a larger lambda") from None
    coef = linalg.cho_solve(cf, rhs)
    e1 = np.zeros(p)
    e1[0] = 1.0
    zeta = linalg.cho_solve(cf, e1)
    gamma = D @ zeta
    return LocalFit(float(coef[0]), coef[1:].copy(), M, zeta, gamma, design)


def modulated_weights(fit: LocalFit) -> np.ndarray:
    """Effective weights ``gamma_i * alpha_i``; ``mu_hat = sum_i w_i Y_i``."""
    return fit.gamma * fit.design.alpha


def objective(design: LocalDesign, responses, coef) -> float:
    """Value of the penalized local least-squares objective at ``coef``."""
    y = _aligned(design, responses)
    coef = np.asarray(coef, np.float64)
    r = y - design.delta @ coef
    return float(np.sum(design.alpha * r * r) + design.lam * np.sum(design.penalty * coef * coef))


def predict(forest: Forest, data: Dataset, x0, lam: float, selected_features=None,
            oob_row: Optional[int] = None) -> float:
    """Local linear forest prediction at one point."""
    w = forest_weights(forest, x0, oob_row=oob_row)
    design = build_design(data, w, x0, selected_features, lam)
    return solve_local_ridge(design, data.responses).mu_hat


@dataclass(frozen=True)
class BatchPrediction:
    mu: np.ndarray          # (n_test, n_lambda)
    status: np.ndarray
    kernel: KernelBatch
    gamma: Optional[np.ndarray]


def predict_batch(forest: Forest, data: Dataset, Xtest=None, lambdas: Sequence[float] = (0.1,),
                  selected_features=None, oob: bool = False, want_gamma: bool = False,
                  kernel: Optional[KernelBatch] = None) -> BatchPrediction:
    """Compiled counterpart of :func:`predict` over many points and penalties.

    With ``Xtest=None`` the training rows themselves are predicted; ``oob``
    then leaves out, for each row, every tree whose subsample contains it.
    Raises if any point has no neighbors or a singular system.
    """
    if Xtest is None:
        Xtest = data.features
        rows = np.arange(data.n) if oob else None
    else:
        rows = None
        if oob:
            raise ValueError("out-of-bag mode needs the training rows as test points")
    Xtest = np.ascontiguousarray(np.atleast_2d(np.asarray(Xtest, np.float64)))
    if Xtest.shape[1] != data.d:
        raise DimensionError(f"test points have {Xtest.shape[1]} features, data has d={data.d}")
    if kernel is None:
        kernel = kernel_batch(forest, Xtest, rows)
    feats = _features(selected_features, data.d)
    lam = np.asarray(lambdas, np.float64).ravel()
    mu, status, gamma = K.local_ridge_batch(kernel.indptr, kernel.indices, kernel.weights,
                                            np.ascontiguousarray(data.features), data.responses,
                                            Xtest, feats, lam, want_gamma)
    if np.any(status == 1):
        raise NoNeighborsError(f"no neighbors for {int(np.sum(status == 1))} test point(s)")
    if np.any(status == 2):
        raise RankError(f"singular local system at {int(np.sum(status == 2))} test point(s); use a larger lambda")
    return BatchPrediction(mu, status, kernel, gamma if want_gamma else None)
