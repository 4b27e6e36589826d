"""Honest regression forests used as neighborhood generators.

Trees are grouped into little bags: every tree in a group draws its
subsample from the same half of the training data, which is what the
variance estimator in :mod:`llforest.variance` relies on.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Optional

import numpy as np

from . import _kernels as K
from .dataset import Dataset, SeededRng, draw_disjoint_subsamples
from .errors import ConfigError, DimensionError


class SplitRule(str, Enum):
    CART = "cart"
    RIDGE_RESIDUAL = "ridge"


@dataclass(frozen=True)
class ForestConfig:
    """Growth parameters for an honest forest.

    ``mtry=None`` resolves to ``ceil(pi_target * d)`` and
    ``residual_cutoff=None`` to ``10 * (d + 1)`` once the data dimension is
    known; see :meth:`resolved`.
    """

    num_trees: int = 2000
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    mtry: Optional[int] = None
    min_leaf_size: int = 5
    balance_omega: float = 0.2
    split_rule: SplitRule = SplitRule.RIDGE_RESIDUAL
    lambda_split: float = 0.1
    residual_cutoff: Optional[int] = None
    bag_group_size: int = 5
    seed: int = 0
    pi_target: float = 0.5
    force_single_prob: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "split_rule", SplitRule(self.split_rule))
        if self.num_trees < 1 or self.bag_group_size < 1:
            raise ConfigError("num_trees and bag_group_size must be positive")
        if self.num_trees % self.bag_group_size:
            raise ConfigError(f"num_trees={self.num_trees} is not a multiple of bag_group_size={self.bag_group_size}")
        if not 0.0 < self.balance_omega <= 0.5:
            raise ConfigError("balance_omega must lie in (0, 0.5]")
        if self.min_leaf_size < 1:
            raise ConfigError("min_leaf_size must be >= 1")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ConfigError("subsample_fraction must lie in (0, 1]")
        if not 0.0 < self.honesty_fraction < 1.0:
            raise ConfigError("honesty_fraction must lie in (0, 1)")
        if self.lambda_split < 0:
            raise ConfigError("lambda_split must be nonnegative")
        if not 0.0 < self.pi_target <= 1.0:
            raise ConfigError("pi_target must lie in (0, 1]")
        if not 0.0 <= self.force_single_prob < 1.0:
            raise ConfigError("force_single_prob must lie in [0, 1)")
        if self.mtry is not None and self.mtry < 1:
            raise ConfigError("mtry must be >= 1")

    def resolved(self, d: int) -> "ForestConfig":
        """Copy with every data-dependent default filled in for dimension ``d``."""
        mtry = self.mtry if self.mtry is not None else max(1, math.ceil(self.pi_target * d))
        if mtry > d:
            raise ConfigError(f"mtry={mtry} exceeds d={d}")
        cutoff = self.residual_cutoff if self.residual_cutoff is not None else 10 * (d + 1)
        return replace(self, mtry=int(mtry), residual_cutoff=int(cutoff))

    def subsample_size(self, n: int) -> int:
        """``ceil(fraction * n)``, rounded down to ``n // 2`` when fraction <= 0.5."""
        s = math.ceil(self.subsample_fraction * n - 1e-9)
        if self.subsample_fraction <= 0.5:
            s = min(s, n // 2)
        if s > n // 2:
            raise ConfigError(
                f"subsample of {s} points does not fit in a half-sample of {n // 2}; "
                "use subsample_fraction <= 0.5"
            )
        return s

    def to_dict(self) -> dict:
        out = asdict(self)
        out["split_rule"] = self.split_rule.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ForestConfig":
        return cls(**data)


@dataclass(frozen=True)
class Split:
    variable: int
    threshold: float
    gain: float


@dataclass(eq=False)
class Tree:
    """Flat node arrays for one honest tree.

    Internal nodes have ``split_var >= 0``; points with
    ``x[split_var] <= threshold`` go left. Leaves list their estimation-sample
    members in ``members[leaf_start : leaf_start + leaf_count]``.
    """

    split_var: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    leaf_start: np.ndarray
    leaf_count: np.ndarray
    members: np.ndarray
    J_indices: np.ndarray
    I_indices: np.ndarray
    group_id: int

    @property
    def n_nodes(self) -> int:
        return len(self.split_var)

    def leaf_members(self, node: int) -> np.ndarray:
        s = self.leaf_start[node]
        return self.members[s: s + self.leaf_count[node]]

    def apply(self, x) -> int:
        node = 0
        while self.split_var[node] >= 0:
            node = self.left[node] if x[self.split_var[node]] <= self.threshold[node] else self.right[node]
        return int(node)

    def same_structure(self, other: "Tree") -> bool:
        return (np.array_equal(self.split_var, other.split_var)
                and np.array_equal(self.threshold, other.threshold)
                and np.array_equal(self.left, other.left)
                and np.array_equal(self.right, other.right)
                and np.array_equal(self.members, other.members)
                and np.array_equal(self.leaf_start, other.leaf_start))

    def to_dict(self) -> dict:
        leaves = np.flatnonzero(self.split_var < 0)
        return {
            "group": int(self.group_id),
            "split_var": self.split_var.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "leaves": {str(int(v)): self.leaf_members(v).tolist() for v in leaves},
            "J": self.J_indices.tolist(),
            "I": self.I_indices.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Tree":
        split_var = np.asarray(data["split_var"], np.int32)
        left = np.asarray(data["left"], np.int32)
        right = np.asarray(data["right"], np.int32)
        n_nodes = len(split_var)
        depth = np.zeros(n_nodes, np.int32)
        for v in range(n_nodes):
            if split_var[v] >= 0:
                depth[left[v]] = depth[right[v]] = depth[v] + 1
        leaf_start = np.full(n_nodes, -1, np.int64)
        leaf_count = np.zeros(n_nodes, np.int64)
        chunks = []
        pos = 0
        # members are stored in depth-first leaf order, as grown
        rank = _dfs_rank(split_var, left, right)
        for key, mem in sorted(data["leaves"].items(), key=lambda kv: rank[int(kv[0])]):
            v = int(key)
            leaf_start[v] = pos
            leaf_count[v] = len(mem)
            chunks.append(np.asarray(mem, np.int64))
            pos += len(mem)
        members = np.concatenate(chunks) if chunks else np.zeros(0, np.int64)
        return cls(split_var, np.asarray(data["threshold"], np.float64), left, right, depth,
                   leaf_start, leaf_count, members, np.asarray(data["J"], np.int64),
                   np.asarray(data["I"], np.int64), int(data["group"]))


def _dfs_rank(split_var, left, right) -> dict:
    rank = {}
    stack = [0]
    while stack:
        v = stack.pop()
        rank[v] = len(rank)
        if split_var[v] >= 0:
            stack.append(int(right[v]))
            stack.append(int(left[v]))
    return rank


@dataclass(frozen=True)
class PackedForest:
    """All trees concatenated into flat arrays for the compiled kernels."""

    split_var: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    node_off: np.ndarray
    leaf_start: np.ndarray
    leaf_count: np.ndarray
    members: np.ndarray
    tree_group: np.ndarray
    in_sample: np.ndarray


@dataclass(eq=False)
class Forest:
    trees: list
    config: ForestConfig
    half_samples: list
    n_train: int
    n_features: int
    meta: dict = field(default_factory=dict)

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    @property
    def n_groups(self) -> int:
        return len(self.half_samples)

    @cached_property
    def packed(self) -> PackedForest:
        sizes = np.array([t.n_nodes for t in self.trees], np.int64)
        node_off = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        mem_sizes = np.array([len(t.members) for t in self.trees], np.int64)
        mem_off = np.concatenate([[0], np.cumsum(mem_sizes)])
        leaf_start = np.concatenate([
            np.where(t.leaf_start >= 0, t.leaf_start + mem_off[b], -1) for b, t in enumerate(self.trees)
        ]).astype(np.int64)
        in_sample = np.zeros((len(self.trees), self.n_train), np.bool_)
        for b, t in enumerate(self.trees):
            in_sample[b, t.J_indices] = True
            in_sample[b, t.I_indices] = True
        return PackedForest(
            split_var=np.concatenate([t.split_var for t in self.trees]).astype(np.int32),
            threshold=np.concatenate([t.threshold for t in self.trees]),
            left=np.concatenate([t.left for t in self.trees]).astype(np.int32),
            right=np.concatenate([t.right for t in self.trees]).astype(np.int32),
            node_off=node_off,
            leaf_start=leaf_start,
            leaf_count=np.concatenate([t.leaf_count for t in self.trees]).astype(np.int64),
            members=np.concatenate([t.members for t in self.trees]).astype(np.int64),
            tree_group=np.array([t.group_id for t in self.trees], np.int64),
            in_sample=in_sample,
        )

    def leaves(self, Xtest, oob_rows=None) -> np.ndarray:
        """Global leaf index per (test point, tree), ``-1`` for skipped trees."""
        Xtest = np.atleast_2d(np.asarray(Xtest, np.float64))
        if Xtest.shape[1] != self.n_features:
            raise DimensionError(f"test points have {Xtest.shape[1]} features, forest expects {self.n_features}")
        if oob_rows is None:
            oob_rows = np.full(Xtest.shape[0], -1, np.int64)
        p = self.packed
        return K.forest_leaves(p.split_var, p.threshold, p.left, p.right, p.node_off,
                               p.leaf_count, p.in_sample, np.ascontiguousarray(Xtest),
                               np.asarray(oob_rows, np.int64))

    def split_frequencies(self, max_depth: int = 4) -> np.ndarray:
        """Counts of splits per (depth, variable), depth 0 being the root."""
        out = np.zeros((max_depth, self.n_features), np.int64)
        for t in self.trees:
            mask = (t.split_var >= 0) & (t.depth < max_depth)
            np.add.at(out, (t.depth[mask], t.split_var[mask]), 1)
        return out

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "n_train": self.n_train,
            "n_features": self.n_features,
            "half_samples": [h.tolist() for h in self.half_samples],
            "trees": [t.to_dict() for t in self.trees],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Forest":
        return cls(
            trees=[Tree.from_dict(t) for t in data["trees"]],
            config=ForestConfig.from_dict(data["config"]),
            half_samples=[np.asarray(h, np.int64) for h in data["half_samples"]],
            n_train=int(data["n_train"]),
            n_features=int(data["n_features"]),
            meta=dict(data.get("meta", {})),
        )


def default_threads() -> int:
    env = os.environ.get("LLF_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def grow_forest(data: Dataset, config: ForestConfig, responses_override=None,
                treatment_residuals=None, threads: Optional[int] = None) -> Forest:
    """Grow ``config.num_trees`` honest trees in little bags of ``bag_group_size``.

    ``responses_override`` replaces the responses used for split selection.
    When ``treatment_residuals`` is given as well, splits are chosen on the
    causal gradient pseudo-outcome formed at each node from the outcome
    residuals (the override) and these treatment residuals.

    The result depends only on the data, the config and its seed; the
    number of threads has no effect on it.
    """
    n, d = data.n, data.d
    cfg = config.resolved(d)
    s = cfg.subsample_size(n)
    if s < 2:
        raise ConfigError(f"subsample of {s} points is too small to split honestly")
    y = np.ascontiguousarray(data.responses if responses_override is None else np.asarray(responses_override, np.float64))
    if y.shape != (n,):
        raise ConfigError("responses_override must have one value per row")
    causal = treatment_residuals is not None
    wres = np.ascontiguousarray(treatment_residuals if causal else np.zeros(n), dtype=np.float64)
    X = np.ascontiguousarray(data.features)
    rule = K.RULE_RIDGE if cfg.split_rule is SplitRule.RIDGE_RESIDUAL else K.RULE_CART
    root = SeededRng(cfg.seed)
    half = n // 2
    n_groups = cfg.num_trees // cfg.bag_group_size
    half_samples = [np.sort(root.generator(0, g).choice(n, size=half, replace=False)) for g in range(n_groups)]

    def grow(b: int) -> Tree:
        g = b // cfg.bag_group_size
        gen = root.generator(1, b)
        J, I = draw_disjoint_subsamples(n, s, cfg.honesty_fraction, gen, pool=half_samples[g])
        out = K.grow_tree(X, y, wres, causal, J.astype(np.int64), I.astype(np.int64), cfg.mtry,
                          cfg.min_leaf_size, cfg.balance_omega, rule, cfg.lambda_split,
                          cfg.residual_cutoff, cfg.force_single_prob, gen)
        return Tree(*out, J_indices=J, I_indices=I, group_id=g)

    threads = threads or default_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(grow, range(cfg.num_trees)))
    else:
        trees = [grow(b) for b in range(cfg.num_trees)]
    return Forest(trees, cfg, half_samples, n, d)


def _split_tol(r, base) -> float:
    return 1e-12 * float(np.sum(r * r) + np.sum((base - base.mean()) ** 2))


def _search(X, r, base, candidate_vars, omega, min_leaf, honest_X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    m = X.shape[0]
    cand = np.sort(np.asarray(candidate_vars, np.int64))
    if honest_X is None:
        Xall, irows, check = X, np.zeros(0, np.int64), False
    else:
        honest_X = np.asarray(honest_X, np.float64)
        Xall = np.ascontiguousarray(np.vstack([X, honest_X]))
        irows, check = np.arange(m, m + honest_X.shape[0], dtype=np.int64), True
    var, thr, gain = K.best_split(Xall, np.ascontiguousarray(r, dtype=np.float64), np.arange(m, dtype=np.int64),
                                  irows, cand, float(omega), int(min_leaf), check, _split_tol(r, base))
    if var < 0 or not np.isfinite(gain):
        return None
    return Split(int(var), float(thr), float(gain))


def best_cart_split(X, y, candidate_vars, omega: float = 0.2, min_leaf: int = 5,
                    honest_X=None) -> Optional[Split]:
    """Minimum within-child SSE split over ``candidate_vars``.

    Thresholds are midpoints between adjacent distinct values. Each child
    must keep ``ceil(omega * m)`` of the ``m`` rows; ``min_leaf`` is enforced
    on the honest sample ``honest_X`` when one is given. Equal scores resolve
    to the lowest variable, then the lowest threshold.
    """
    y = np.asarray(y, np.float64)
    return _search(X, y, y, candidate_vars, omega, min_leaf, honest_X)


def best_residual_split(X, y, candidate_vars, lambda_split: float = 0.1, parent_beta=None,
                        residual_cutoff: int = 10, omega: float = 0.2, min_leaf: int = 5,
                        honest_X=None):
    """CART split on ridge residuals; returns ``(split, beta)``.

    Nodes with at least ``residual_cutoff`` rows fit their own ridge
    coefficients (intercept first, unpenalized). Smaller nodes reuse
    ``parent_beta``; without one the raw responses are split. ``beta`` is
    what children should inherit.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, np.float64)
    m = X.shape[0]
    rows = np.arange(m, dtype=np.int64)
    beta = None
    if m >= residual_cutoff:
        fitted = np.empty(X.shape[1] + 1)
        if K.ridge_fit(X, y, rows, float(lambda_split), fitted):
            beta = fitted
    if beta is None and parent_beta is not None:
        beta = np.asarray(parent_beta, np.float64)
    r = y
    if beta is not None:
        r = np.empty(m)
        K.ridge_residuals(X, y, rows, beta, r)
    return _search(X, r, y, candidate_vars, omega, min_leaf, honest_X), beta
