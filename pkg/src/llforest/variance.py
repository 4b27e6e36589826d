"""Delta-method variance of local linear forest predictions.

The prediction's variance is the variance of a forest average of score
residuals ``Gamma_i``. It is estimated by half-sampling over little bags,
with the Monte Carlo noise of using only a few trees per bag removed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from . import _kernels as K
from .errors import ConfigError
from .forest import Forest
from .locallinear import LocalDesign, LocalFit


@dataclass(frozen=True)
class VarianceEstimate:
    sigma2: float
    groups_used: int
    between_var: float
    within_var: float

    @property
    def truncated(self) -> bool:
        """True when the noise correction exceeded the between-bag variance."""
        return self.sigma2 == 0.0 and self.between_var > 0.0


def score_residuals(design: LocalDesign, responses, fit: LocalFit, X=None) -> np.ndarray:
    """``Gamma_i = (zeta . Delta_i) (Y_i - Delta_i (mu, theta))`` with ``zeta = M^{-1} e_1``.

    Without ``X`` the scores are returned for the design rows. Passing the
    full training matrix ``X`` (and full-length ``responses``) evaluates the
    same formula for every training row, including zero-weight ones.
    """
    coef = fit.coef
    if X is None:
        y = np.asarray(responses, np.float64).ravel()
        y = y if y.shape[0] == design.n_eff else y[design.indices]
        D = design.delta
    else:
        X = np.asarray(X, np.float64)
        y = np.asarray(responses, np.float64).ravel()
        D = np.ones((X.shape[0], design.features.size + 1))
        D[:, 1:] = X[:, design.features] - design.x0[design.features]
    return (D @ fit.zeta) * (y - D @ coef)


def little_bags_variance(forest: Forest, Gamma, x0, oob_row: Optional[int] = None) -> VarianceEstimate:
    """Half-sampling variance of the forest average of ``Gamma`` at ``x0``.

    ``Gamma`` has one entry per training row. Each bag contributes the mean
    over its trees of the leaf-average of ``Gamma``; the estimate is the
    between-bag variance minus the pooled within-bag variance divided by
    the bag size, truncated at zero.
    """
    if forest.config.bag_group_size < 2 or forest.n_groups < 2:
        raise ConfigError("variance estimation needs bag_group_size >= 2 and at least 2 bags")
    Gamma = np.asarray(Gamma, np.float64).ravel()
    if Gamma.shape[0] != forest.n_train:
        raise ValueError(f"Gamma has {Gamma.shape[0]} entries, forest was trained on {forest.n_train}")
    x0 = np.asarray(x0, np.float64).ravel()
    oob = None if oob_row is None else np.array([oob_row], np.int64)
    leaves = forest.leaves(x0[None, :], oob)
    p = forest.packed
    n = forest.n_train
    indptr = np.array([0, n], np.int64)
    s2, bv, wv, used = K.little_bags_batch(leaves, p.leaf_start, p.leaf_count, p.members, p.tree_group,
                                           forest.n_groups, indptr, np.arange(n, dtype=np.int64), Gamma, n)
    return VarianceEstimate(float(s2[0]), int(used[0]), float(bv[0]), float(wv[0]))


def little_bags_batch(forest: Forest, kernel, gamma) -> tuple[np.ndarray, np.ndarray]:
    """Variance for every point of a kernel batch; ``gamma`` is CSR-aligned.

    Returns ``(sigma2, groups_used)``.
    """
    if forest.config.bag_group_size < 2 or forest.n_groups < 2:
        raise ConfigError("variance estimation needs bag_group_size >= 2 and at least 2 bags")
    p = forest.packed
    s2, _, _, used = K.little_bags_batch(kernel.leaves, p.leaf_start, p.leaf_count, p.members, p.tree_group,
                                         forest.n_groups, kernel.indptr, kernel.indices, gamma, forest.n_train)
    return s2, used


def confidence_interval(mu_hat, sigma2, level: float = 0.95):
    """Gaussian interval ``mu_hat -/+ z_{(1+level)/2} sqrt(sigma2)``."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    sigma2 = np.asarray(sigma2, np.float64)
    if np.any(sigma2 < 0):
        raise ValueError("sigma2 must be nonnegative")
    z = stats.norm.ppf(0.5 + level / 2.0)
    half = z * np.sqrt(sigma2)
    lo, hi = mu_hat - half, mu_hat + half
    if np.ndim(lo) == 0:
        return float(lo), float(hi)
    return lo, hi
