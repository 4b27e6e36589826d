"""Forest kernel weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from .forest import Forest


@dataclass(frozen=True)
class WeightVector:
    """Sparse nonnegative weights over training rows, summing to one."""

    indices: np.ndarray
    weights: np.ndarray
    test_point: np.ndarray
    trees_used: int = 0

    def dense(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.indices] = self.weights
        return out

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class KernelBatch:
    """Weights for many test points in CSR layout plus the per-tree leaves."""

    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    leaves: np.ndarray

    def row(self, t: int):
        a, b = self.indptr[t], self.indptr[t + 1]
        return self.indices[a:b], self.weights[a:b]


def kernel_batch(forest: Forest, Xtest, oob_rows=None) -> KernelBatch:
    """Forest weights for every row of ``Xtest``.

    ``oob_rows[t] >= 0`` marks test point ``t`` as training row
    ``oob_rows[t]``; trees that saw that row are left out.
    """
    leaves = forest.leaves(Xtest, oob_rows)
    p = forest.packed
    indptr, idx, val = K.leaves_to_weights(leaves, p.leaf_start, p.leaf_count, p.members, forest.n_train)
    return KernelBatch(indptr, idx, val, leaves)


def forest_weights(forest: Forest, x0, oob_row: Optional[int] = None) -> WeightVector:
    """alpha_i(x0) = (1/B') sum_b 1{i in L_b(x0)} / |L_b(x0)|.

    Only estimation-sample members populate leaves. Trees whose leaf at
    ``x0`` is empty (or, with ``oob_row``, whose subsample contains that row)
    are dropped and ``B'`` counts the remaining trees.
    """
    x0 = np.asarray(x0, np.float64).ravel()
    oob = None if oob_row is None else np.array([oob_row], np.int64)
    kb = kernel_batch(forest, x0[None, :], oob)
    idx, w = kb.row(0)
    return WeightVector(idx.copy(), w.copy(), x0, int(np.sum(kb.leaves[0] >= 0)))
