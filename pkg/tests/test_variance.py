import numpy as np
import pytest

from llforest import (ConfigError, Dataset, Forest, ForestConfig, build_design, confidence_interval,
                      forest_weights, grow_forest, kernel_batch, little_bags_variance, score_residuals,
                      solve_local_ridge)
from llforest.locallinear import objective
from llforest.variance import little_bags_batch

from oracles import little_bags_oracle


def local_fit(forest, data, x0, lam=0.1):
    w = forest_weights(forest, x0)
    design = build_design(data, w, x0, lam=lam)
    return design, solve_local_ridge(design, data.responses)


class TestScoreResiduals:
    def test_formula(self, small_forest, friedman_small):
        data, _ = friedman_small
        x0 = np.full(data.d, 0.4)
        design, fit = local_fit(small_forest, data, x0)
        g = score_residuals(design, data.responses, fit)
        D = design.delta
        zeta = np.linalg.solve(design.system_matrix(), np.eye(D.shape[1])[0])
        y = data.responses[design.indices]
        np.testing.assert_allclose(g, (D @ zeta) * (y - D @ fit.coef), rtol=1e-10, atol=1e-12)

    def test_full_length_agrees_on_support(self, small_forest, friedman_small):
        data, _ = friedman_small
        x0 = np.full(data.d, 0.6)
        design, fit = local_fit(small_forest, data, x0)
        full = score_residuals(design, data.responses, fit, X=data.features)
        np.testing.assert_allclose(full[design.indices], score_residuals(design, data.responses, fit), rtol=1e-12)

    def test_weighted_scores_sum_to_penalty_term(self, small_forest, friedman_small):
        # first-order condition: sum alpha_i Gamma_i = zeta' (D'A r) = zeta' lam J beta
        data, _ = friedman_small
        x0 = np.full(data.d, 0.5)
        design, fit = local_fit(small_forest, data, x0, lam=0.7)
        g = score_residuals(design, data.responses, fit)
        np.testing.assert_allclose(design.alpha @ g, fit.zeta @ (0.7 * design.penalty * fit.coef), atol=1e-10)

    def test_system_matrix_is_half_hessian(self, small_forest, friedman_small):
        data, _ = friedman_small
        x0 = np.full(data.d, 0.5)
        design, fit = local_fit(small_forest, data, x0, lam=0.3)
        p = fit.coef.size
        h = 1e-3
        H = np.empty((p, p))
        for a in range(p):
            for b in range(p):
                ea, eb = np.eye(p)[a] * h, np.eye(p)[b] * h
                f = lambda c: objective(design, data.responses, c)
                H[a, b] = (f(fit.coef + ea + eb) - f(fit.coef + ea - eb) - f(fit.coef - ea + eb)
                           + f(fit.coef - ea - eb)) / (4 * h * h)
        np.testing.assert_allclose(H / 2, fit.M_lambda, rtol=1e-5, atol=1e-7)


class TestLittleBags:
    def test_oracle_small_n(self):
        rng = np.random.default_rng(0)
        data = Dataset(rng.random((12, 2)), rng.normal(size=12))
        forest = grow_forest(data, ForestConfig(num_trees=40, min_leaf_size=1, seed=2))
        gamma = rng.normal(size=12)
        for x0 in rng.random((5, 2)):
            est = little_bags_variance(forest, gamma, x0)
            np.testing.assert_allclose(est.sigma2, little_bags_oracle(forest, gamma, x0), rtol=1e-10, atol=1e-15)

    def test_oracle_larger(self, small_forest, friedman_small):
        data, _ = friedman_small
        rng = np.random.default_rng(1)
        gamma = rng.normal(size=data.n)
        for x0 in rng.random((3, data.d)):
            np.testing.assert_allclose(little_bags_variance(small_forest, gamma, x0).sigma2,
                                       little_bags_oracle(small_forest, gamma, x0), rtol=1e-10, atol=1e-15)

    def test_zero_scores(self, small_forest, friedman_small):
        data, _ = friedman_small
        est = little_bags_variance(small_forest, np.zeros(data.n), np.full(data.d, 0.5))
        assert est.sigma2 == 0.0 and est.between_var == 0.0

    def test_duplicate_trees_have_no_spread(self, small_forest, friedman_small):
        data, _ = friedman_small
        t = small_forest.trees[0]
        clones = [type(t)(t.split_var, t.threshold, t.left, t.right, t.depth, t.leaf_start, t.leaf_count,
                          t.members, t.J_indices, t.I_indices, g) for g in range(10) for _ in range(5)]
        f = Forest(clones, small_forest.config, small_forest.half_samples, data.n, data.d)
        gamma = np.random.default_rng(0).normal(size=data.n)
        est = little_bags_variance(f, gamma, np.full(data.d, 0.5))
        assert est.sigma2 < 1e-25 and est.groups_used == 10

    def test_batch_matches_single(self, small_forest, friedman_small):
        data, _ = friedman_small
        X = np.random.default_rng(2).random((4, data.d))
        kb = kernel_batch(small_forest, X)
        gammas = []
        singles = []
        for t in range(4):
            design, fit = local_fit(small_forest, data, X[t])
            g = score_residuals(design, data.responses, fit)
            gammas.append(g)
            full = score_residuals(design, data.responses, fit, X=data.features)
            singles.append(little_bags_variance(small_forest, full, X[t]).sigma2)
        s2, used = little_bags_batch(small_forest, kb, np.concatenate(gammas))
        np.testing.assert_allclose(s2, singles, rtol=1e-10, atol=1e-15)

    def test_needs_groups(self, friedman_small):
        data, _ = friedman_small
        f = grow_forest(data, ForestConfig(num_trees=5, bag_group_size=1))
        with pytest.raises(ConfigError):
            little_bags_variance(f, np.zeros(data.n), np.zeros(data.d))

    def test_wrong_length(self, small_forest):
        with pytest.raises(ValueError):
            little_bags_variance(small_forest, np.zeros(3), np.zeros(small_forest.n_features))

    def test_shrinks_with_n(self):
        # with the subsample size held fixed the variance falls roughly like s / n
        out = []
        for n in (200, 3200):
            rng = np.random.default_rng(n)
            X = rng.random((n, 2))
            data = Dataset(X, X[:, 0] + rng.normal(size=n))
            f = grow_forest(data, ForestConfig(num_trees=1000, subsample_fraction=100 / n, seed=1))
            s2 = []
            for x0 in np.random.default_rng(0).uniform(0.25, 0.75, (10, 2)):
                design, fit = local_fit(f, data, x0)
                gamma = score_residuals(design, data.responses, fit, X=data.features)
                s2.append(little_bags_variance(f, gamma, x0).sigma2)
            out.append(np.mean(s2))
        assert out[1] < 0.2 * out[0]


class TestInterval:
    def test_standard_normal(self):
        lo, hi = confidence_interval(0.0, 1.0, 0.95)
        np.testing.assert_allclose([lo, hi], [-1.959963984540054, 1.959963984540054], rtol=1e-12)

    def test_half_level(self):
        lo, hi = confidence_interval(1.0, 4.0, 0.5)
        np.testing.assert_allclose([lo, hi], [1 - 2 * 0.6744897501960817, 1 + 2 * 0.6744897501960817], rtol=1e-12)

    def test_vectorized_and_monotone(self):
        mu = np.array([0.0, 1.0])
        lo80, hi80 = confidence_interval(mu, np.array([1.0, 2.0]), 0.8)
        lo95, hi95 = confidence_interval(mu, np.array([1.0, 2.0]), 0.95)
        assert np.all(hi95 - lo95 > hi80 - lo80)

    @pytest.mark.parametrize("level", [0.0, 1.0, 1.5])
    def test_bad_level(self, level):
        with pytest.raises(ValueError):
            confidence_interval(0.0, 1.0, level)

    def test_negative_variance(self):
        with pytest.raises(ValueError):
            confidence_interval(0.0, -1.0)
