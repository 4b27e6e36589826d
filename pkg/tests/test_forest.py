import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llforest import (ConfigError, Dataset, DimensionError, Forest, ForestConfig, SplitRule,
                      best_cart_split, best_residual_split, grow_forest)

from oracles import exhaustive_cart_split


class TestCartSplit:
    def test_two_level_step(self):
        X = np.array([[1.0], [2.0], [3.0], [4.0]])
        s = best_cart_split(X, [0, 0, 10, 10], [0], omega=0.2, min_leaf=1)
        assert s.variable == 0 and s.threshold == 2.5
        np.testing.assert_allclose(s.gain, 100.0)

    def test_tie_goes_to_lowest_variable(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        X = np.column_stack([x, x])
        s = best_cart_split(X, [0, 0, 10, 10], [1, 0], min_leaf=1)
        assert s.variable == 0

    def test_tie_goes_to_lowest_threshold(self):
        X = np.arange(6.0)[:, None]
        s = best_cart_split(X, [0, 1, 0, 1, 0, 1], [0], omega=0.1, min_leaf=1)
        oracle = exhaustive_cart_split(X, np.array([0, 1, 0, 1, 0, 1.0]), [0], omega=0.1, min_leaf=1)
        assert s.threshold == oracle[2]

    def test_constant_response_is_still_split_or_none(self):
        X = np.arange(10.0)[:, None]
        s = best_cart_split(X, np.ones(10), [0], min_leaf=1)
        assert s is None or s.gain <= 1e-12

    def test_constant_feature_gives_none(self):
        assert best_cart_split(np.ones((10, 1)), np.arange(10.0), [0], min_leaf=1) is None

    def test_balance_constraint(self):
        X = np.arange(10.0)[:, None]
        y = np.zeros(10)
        y[0] = 100.0
        s = best_cart_split(X, y, [0], omega=0.2, min_leaf=1)
        assert s.threshold == 1.5

    def test_honest_min_leaf(self):
        X = np.arange(10.0)[:, None]
        y = np.r_[np.zeros(5), np.ones(5)]
        honest = np.array([[0.5], [1.5], [7.5], [8.5], [9.5]])
        s = best_cart_split(X, y, [0], min_leaf=2, honest_X=honest)
        left = np.sum(honest[:, 0] <= s.threshold)
        assert left >= 2 and len(honest) - left >= 2

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(8, 40), st.integers(1, 4))
    def test_matches_exhaustive_oracle(self, seed, m, d):
        rng = np.random.default_rng(seed)
        X = np.round(rng.random((m, d)), 2)
        y = rng.normal(size=m)
        s = best_cart_split(X, y, range(d), omega=0.2, min_leaf=1)
        o = exhaustive_cart_split(X, y, range(d), omega=0.2, min_leaf=1)
        if o is None:
            assert s is None
            return
        sse = np.sum((y - y.mean()) ** 2) - s.gain
        np.testing.assert_allclose(sse, o[0], rtol=1e-9, atol=1e-9)


class TestResidualSplit:
    def test_linear_signal_is_ignored(self):
        rng = np.random.default_rng(0)
        X = rng.random((200, 2))
        y = 10 * X[:, 0] + np.where(X[:, 1] > 0.5, 1.0, 0.0) + 0.01 * rng.normal(size=200)
        cart = best_cart_split(X, y, [0, 1], min_leaf=1)
        ridge, beta = best_residual_split(X, y, [0, 1], lambda_split=0.1, residual_cutoff=10, min_leaf=1)
        assert ridge.variable == 1
        np.testing.assert_allclose(ridge.threshold, 0.5, atol=0.05)
        assert beta.shape == (3,)
        assert cart.variable == 0

    def test_small_node_inherits_parent(self):
        X = np.arange(6.0)[:, None]
        y = 2 * X[:, 0] + np.r_[0, 0, 0, 1, 1, 1]
        parent = np.array([0.0, 2.0])
        s, beta = best_residual_split(X, y, [0], parent_beta=parent, residual_cutoff=100, min_leaf=1)
        np.testing.assert_array_equal(beta, parent)
        assert s.threshold == 2.5

    def test_small_node_without_parent_uses_raw(self):
        X = np.arange(6.0)[:, None]
        y = np.r_[0, 0, 0, 5, 5, 5.0]
        s, beta = best_residual_split(X, y, [0], residual_cutoff=100, min_leaf=1)
        assert beta is None and s.threshold == 2.5


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        {"num_trees": 7}, {"balance_omega": 0.6}, {"min_leaf_size": 0}, {"subsample_fraction": 0.0},
        {"honesty_fraction": 1.0}, {"lambda_split": -1.0}, {"mtry": 0}, {"pi_target": 0.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ForestConfig(**kwargs)

    def test_resolved_defaults(self):
        cfg = ForestConfig(num_trees=10).resolved(7)
        assert cfg.mtry == 4 and cfg.residual_cutoff == 80

    def test_mtry_exceeds_d(self):
        with pytest.raises(ConfigError):
            ForestConfig(mtry=5).resolved(3)

    def test_subsample_size(self):
        assert ForestConfig().subsample_size(101) == 50
        with pytest.raises(ConfigError):
            ForestConfig(subsample_fraction=0.8).subsample_size(100)


class TestGrowForest:
    def test_honesty_and_leaf_sizes(self, small_forest):
        for t in small_forest.trees:
            assert not set(t.J_indices) & set(t.I_indices)
            assert set(t.members.tolist()) == set(t.I_indices.tolist())
            leaves = t.split_var < 0
            assert np.all(t.leaf_count[leaves] >= small_forest.config.min_leaf_size)

    def test_little_bags_share_half_sample(self, small_forest):
        for t in small_forest.trees:
            half = set(small_forest.half_samples[t.group_id].tolist())
            assert set(t.J_indices.tolist()) | set(t.I_indices.tolist()) <= half

    def test_balance(self, friedman_small):
        data, _ = friedman_small
        f = grow_forest(data, ForestConfig(num_trees=10, balance_omega=0.2, seed=1))
        for t in f.trees:
            jcount = _j_counts(t, data.features)
            for v in np.flatnonzero(t.split_var >= 0):
                m = jcount[v]
                assert min(jcount[t.left[v]], jcount[t.right[v]]) >= np.ceil(0.2 * m - 1e-9)

    def test_thread_count_has_no_effect(self, friedman_small):
        data, _ = friedman_small
        cfg = ForestConfig(num_trees=20, seed=9)
        a = grow_forest(data, cfg, threads=1)
        b = grow_forest(data, cfg, threads=4)
        assert all(x.same_structure(y) for x, y in zip(a.trees, b.trees))

    def test_seed_changes_forest(self, friedman_small):
        data, _ = friedman_small
        a = grow_forest(data, ForestConfig(num_trees=5, seed=1))
        b = grow_forest(data, ForestConfig(num_trees=5, seed=2))
        assert not all(x.same_structure(y) for x, y in zip(a.trees, b.trees))

    def test_round_trip(self, small_forest):
        g = Forest.from_dict(small_forest.to_dict())
        assert all(x.same_structure(y) for x, y in zip(small_forest.trees, g.trees))
        for x, y in zip(small_forest.trees, g.trees):
            np.testing.assert_array_equal(x.depth, y.depth)
            np.testing.assert_array_equal(x.leaf_count, y.leaf_count)

    def test_constant_response(self):
        rng = np.random.default_rng(0)
        data = Dataset(rng.random((60, 3)), np.full(60, 2.0))
        f = grow_forest(data, ForestConfig(num_trees=5))
        assert f.num_trees == 5

    def test_tiny_data(self):
        with pytest.raises(ConfigError):
            grow_forest(Dataset(np.ones((3, 1)), np.zeros(3)), ForestConfig(num_trees=5))

    def test_dimension_check(self, small_forest):
        with pytest.raises(DimensionError):
            small_forest.leaves(np.zeros((1, 2)))

    def test_split_frequencies(self, small_forest):
        freq = small_forest.split_frequencies(3)
        assert freq.shape == (3, small_forest.n_features)
        assert freq[0].sum() <= small_forest.num_trees

    def test_ridge_vs_cart_rule_stored(self, friedman_small):
        data, _ = friedman_small
        f = grow_forest(data, ForestConfig(num_trees=5, split_rule="cart"))
        assert f.config.split_rule is SplitRule.CART


def _j_counts(tree, X):
    """J-sample count per node, recovered by routing J rows down the tree."""
    counts = np.zeros(tree.n_nodes, np.int64)
    for i in tree.J_indices:
        node = 0
        counts[0] += 1
        while tree.split_var[node] >= 0:
            node = tree.left[node] if X[i, tree.split_var[node]] <= tree.threshold[node] else tree.right[node]
            counts[node] += 1
    return counts


def test_split_sample_responses_do_drive_structure(friedman_small):
    # negative control for the honesty check: permuting J-sample responses changes the tree
    data, _ = friedman_small
    cfg = ForestConfig(num_trees=5, seed=4)
    base = grow_forest(data, cfg, threads=1)
    tree = base.trees[0]
    y = data.responses.copy()
    y[tree.J_indices] = y[np.random.default_rng(0).permutation(tree.J_indices)]
    other = grow_forest(data.with_responses(y), cfg, threads=1).trees[0]
    assert not tree.same_structure(other)


def test_honest_sample_responses_do_not_drive_structure(friedman_small):
    data, _ = friedman_small
    cfg = ForestConfig(num_trees=5, seed=4)
    tree = grow_forest(data, cfg, threads=1).trees[2]
    y = data.responses.copy()
    y[tree.I_indices] = 1e6 * np.random.default_rng(1).normal(size=tree.I_indices.size)
    assert tree.same_structure(grow_forest(data.with_responses(y), cfg, threads=1).trees[2])
