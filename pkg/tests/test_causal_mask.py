import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from because.causal_mask import (
    CITConfig,
    CoreMatrix,
    IHTConfig,
    cit_edge_test_features,
    estimate_mask,
    estimate_mask_features,
    hard_threshold,
    iht_solve,
    mask_to_graph,
    normalized_design,
    regression_design,
    reweight_mask,
    topological_order,
)
from because.synthetic import SCMSpec, scm_dataset, support_metrics
from because.core import empirical_transition_targets


def rng(seed=0):
    return np.random.default_rng(seed)


class TestIHT:
    def test_identity_design_one_step(self):
        T = np.array([0.3, 0.9, 0.5])
        beta = iht_solve(np.eye(3), T, IHTConfig(lam=0.0, eta=1.0, max_iters=1))
        assert np.allclose(beta, T)

    def test_total_thresholding(self):
        X = np.eye(3)
        T = np.array([0.2, 0.4, 0.1])
        beta = iht_solve(X, T, IHTConfig(lam=10.0, eta=1.0, max_iters=50))
        assert np.all(beta == 0.0)

    def test_clamps_to_unit_interval(self):
        X = np.eye(2)
        beta = iht_solve(X, np.array([5.0, -3.0]), IHTConfig(lam=0.0, max_iters=100))
        assert np.all(beta >= 0.0) and np.all(beta <= 1.0)

    def test_objective_nonincreasing_with_normalized_design(self):
        # the shifted threshold is the exact prox of (2*lam/eta)*sum(beta) on
        # [0,1]^p, so that composite objective is the monotone quantity
        g = rng(1)
        for trial in range(10):
            X = g.standard_normal((60, 8))
            X /= np.linalg.norm(X, 2)
            beta_true = np.zeros(8)
            beta_true[:3] = g.uniform(0.4, 1.0, 3)
            T = X @ beta_true
            cfg = IHTConfig(lam=0.02, eta=1.0, max_iters=200, tol=0.0)
            beta = np.ones(8)
            prev = np.inf
            for _ in range(50):
                step = beta + cfg.eta * (X.T @ (T - X @ beta))
                beta = np.minimum(hard_threshold(step, cfg.lam), 1.0)
                obj = np.sum((T - X @ beta) ** 2) + (2 * cfg.lam / cfg.eta) * beta.sum()
                assert obj <= prev + 1e-9
                prev = obj

    def test_eta_above_one_rejected(self):
        with pytest.raises(ValueError):
            IHTConfig(eta=1.5)

    @staticmethod
    def best_subset_support(X, T, lam):
        """Exhaustive l0 oracle: minimize ||T - X beta_S||^2 + lam |S| over supports."""
        p = X.shape[1]
        best, best_support = np.inf, ()
        for r in range(p + 1):
            for S in itertools.combinations(range(p), r):
                if S:
                    coef, *_ = np.linalg.lstsq(X[:, S], T, rcond=None)
                    resid = T - X[:, S] @ coef
                else:
                    resid = T
                obj = float(resid @ resid) + lam * r
                if obj < best - 1e-12:
                    best, best_support = obj, S
        return set(best_support)

    def test_support_matches_best_subset_on_noisy_instance(self):
        g = rng(7)
        n, p = 500, 8
        X = g.standard_normal((n, p))
        X /= np.linalg.norm(X, 2)
        beta_true = np.zeros(p)
        beta_true[g.choice(p, 3, replace=False)] = g.uniform(0.5, 1.0, 3)
        T = X @ beta_true + 0.01 * g.standard_normal(n)
        cfg = IHTConfig(lam=0.02, eta=1.0, max_iters=2000, tol=1e-12)
        beta = iht_solve(X, T, cfg)
        assert set(np.flatnonzero(beta)) == self.best_subset_support(X, T, cfg.lam ** 2)

    def test_oracle_equivalence_noiseless(self):
        g = rng(3)
        hits = 0
        for trial in range(25):
            p = int(g.integers(4, 11))
            n = 200
            X = g.standard_normal((n, p))
            X /= np.linalg.norm(X, 2)
            k = int(g.integers(1, min(4, p)))
            beta_true = np.zeros(p)
            beta_true[g.choice(p, k, replace=False)] = g.uniform(0.3, 1.0, k)
            T = X @ beta_true
            beta = iht_solve(X, T, IHTConfig(lam=0.02, eta=1.0, max_iters=3000, tol=1e-13))
            if set(np.flatnonzero(beta)) == self.best_subset_support(X, T, 0.02 ** 2):
                hits += 1
        assert hits == 25


class TestCIT:
    def test_deterministic_dependence(self):
        g = rng(2)
        x = g.integers(2, size=1000).astype(float)
        Phi = x[:, None]
        Mu = x[:, None]
        p = cit_edge_test_features(Phi, Mu, 0, 0, CITConfig())
        assert p < 1e-10

    def test_constant_factor_gives_p_one(self):
        Phi = np.ones((100, 1))
        Mu = rng(0).standard_normal((100, 1))
        assert cit_edge_test_features(Phi, Mu, 0, 0, CITConfig()) == 1.0

    @pytest.mark.slow
    def test_type_one_error_calibration(self):
        g = rng(11)
        alpha = 0.05
        rejections = 0
        trials = 1000
        for _ in range(trials):
            x = g.integers(2, size=10_000).astype(float)
            y = g.integers(2, size=10_000).astype(float)
            p = cit_edge_test_features(x[:, None], y[:, None], 0, 0, CITConfig())
            rejections += p < alpha
        assert abs(rejections / trials - alpha) <= 0.02

    def test_chain_conditional_independence(self):
        # X -> Z -> Y: marginal X-Y dependence, conditional independence given Z
        g = rng(5)
        n = 4000
        x = g.integers(2, size=n).astype(float)
        z = np.where(g.random(n) < 0.9, x, 1 - x)
        y = np.where(g.random(n) < 0.9, z, 1 - z)
        cfg = CITConfig()
        p_marginal = cit_edge_test_features(x[:, None], y[:, None], 0, 0, cfg)
        p_conditional = cit_edge_test_features(
            np.stack([x, z], axis=1), y[:, None], 0, 0, cfg)
        assert p_marginal < 1e-6
        assert p_conditional > 1e-3

    def test_conditional_p_uniform_under_chain_null(self):
        g = rng(9)
        cfg = CITConfig()
        ps = []
        for _ in range(200):
            n = 2000
            x = g.integers(2, size=n).astype(float)
            z = np.where(g.random(n) < 0.9, x, 1 - x)
            y = np.where(g.random(n) < 0.9, z, 1 - z)
            ps.append(cit_edge_test_features(np.stack([x, z], axis=1),
                                             y[:, None], 0, 0, cfg))
        # under the conditional null, small p-values appear at their nominal rate
        assert abs(np.mean(np.asarray(ps) < 0.1) - 0.1) < 0.08


class TestEstimateMask:
    def test_synthetic_recovery(self):
        spec = SCMSpec(n_edges=5, noise=0.05)
        precs, recs = [], []
        for seed in range(3):
            ds, phi, mu, m_true = scm_dataset(spec, 5000, seed)
            mask = estimate_mask(phi, mu, ds, CITConfig(), IHTConfig())
            p, r, _ = support_metrics(mask.support, m_true != 0)
            precs.append(p)
            recs.append(r)
        assert np.mean(precs) >= 0.9
        assert np.mean(recs) >= 0.9

    def test_threshold_near_one_keeps_everything(self):
        spec = SCMSpec(n_edges=5)
        ds, phi, mu, _ = scm_dataset(spec, 2000, 0)
        mask = estimate_mask(phi, mu, ds, CITConfig(p_thres=1 - 1e-12),
                             IHTConfig(lam=0.0))
        assert mask.p_values is not None
        kept = mask.p_values < 1 - 1e-12
        assert kept.all()

    def test_shrinking_threshold_never_adds_edges(self):
        spec = SCMSpec(n_edges=5)
        ds, phi, mu, _ = scm_dataset(spec, 3000, 1)
        supports = []
        for thres in (1e-2, 1e-6):
            mask = estimate_mask(phi, mu, ds, CITConfig(p_thres=thres),
                                 IHTConfig(lam=0.0))
            supports.append(mask.p_values < thres)
        assert not np.any(supports[1] & ~supports[0])

    def test_empty_support_falls_back_to_full(self):
        g = rng(3)
        Phi = g.standard_normal((500, 3))
        Mu = g.standard_normal((500, 2))  # independent: no edges survive
        with pytest.warns(UserWarning, match="full graph"):
            mask = estimate_mask_features(Phi, Mu, np.ones(500),
                                          CITConfig(p_thres=1e-12), IHTConfig(lam=0.0))
        assert mask.shape == (3, 2)

    def test_paper_literal_rule_inverts(self):
        spec = SCMSpec(n_edges=5)
        ds, phi, mu, _ = scm_dataset(spec, 3000, 2)
        keep = estimate_mask(phi, mu, ds, CITConfig(edge_rule="keep_dependent"),
                             IHTConfig(lam=0.0))
        lit = estimate_mask(phi, mu, ds, CITConfig(edge_rule="paper_literal"),
                            IHTConfig(lam=0.0))
        dependent = keep.p_values < 1e-4
        assert np.array_equal(lit.p_values >= 1e-4, ~dependent)


class TestReweight:
    def mk(self, m):
        return CoreMatrix(np.asarray(m, dtype=float))

    def test_single_batch_identity(self):
        m = self.mk([[0.5, 0.0], [1.0, 0.2]])
        out = reweight_mask([m], [3.0])
        assert np.array_equal(out.m, m.m)

    def test_equal_weights_mean(self):
        a = self.mk([[0.2, 0.4]])
        b = self.mk([[0.6, 0.0]])
        out = reweight_mask([a, b], [1.0, 1.0])
        assert np.allclose(out.m, [[0.4, 0.2]])

    def test_matches_scalar_loop_oracle(self):
        g = rng(8)
        masks = [self.mk(g.uniform(0, 1, (3, 2))) for _ in range(4)]
        w = list(g.uniform(0.1, 2.0, 4))
        out = reweight_mask(masks, w)
        for i in range(3):
            for j in range(2):
                expected = sum(wk * mk.m[i, j] for wk, mk in zip(w, masks)) / sum(w)
                assert abs(out.m[i, j] - expected) < 1e-12

    def test_convex_combination_bounds(self):
        g = rng(9)
        masks = [self.mk(g.uniform(0, 1, (4, 3))) for _ in range(5)]
        w = list(g.uniform(0, 1, 5) + 0.01)
        out = reweight_mask(masks, w)
        stack = np.stack([m.m for m in masks])
        assert np.all(out.m >= stack.min(axis=0) - 1e-12)
        assert np.all(out.m <= stack.max(axis=0) + 1e-12)

    def test_zero_weights_rejected(self):
        with pytest.raises(ValueError):
            reweight_mask([self.mk([[0.1]])], [0.0])


class TestGraph:
    def test_zero_mask_edgeless(self):
        g = mask_to_graph(CoreMatrix(np.zeros((3, 2))))
        assert g.n_edges == 0

    def test_full_mask_complete_bipartite(self):
        g = mask_to_graph(CoreMatrix.full(3, 2))
        assert g.n_edges == 6
        assert not g.adjacency[3:, :3].any()
        assert not g.adjacency[:3, :3].any()
        assert not g.adjacency[3:, 3:].any()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 12 - 1))
    def test_always_a_dag(self, bits):
        m = np.array([(bits >> k) & 1 for k in range(12)], dtype=float).reshape(4, 3)
        g = mask_to_graph(CoreMatrix(m))
        assert topological_order(g.adjacency) is not None


class TestTargets:
    def test_deterministic_dataset_targets_are_one(self):
        from because.unlock import BehaviorPolicy, GridConfig, collect
        ds = collect(GridConfig(), BehaviorPolicy("expert"), 30, seed=1)
        assert np.allclose(empirical_transition_targets(ds), 1.0)

    def test_design_matrix_is_rowwise_kronecker(self):
        g = rng(4)
        Phi = g.standard_normal((5, 3))
        Mu = g.standard_normal((5, 2))
        X = regression_design(Phi, Mu)
        for i in range(5):
            assert np.allclose(X[i], np.kron(Phi[i], Mu[i]))

    def test_normalized_design_spectral_bound(self):
        g = rng(5)
        Phi = g.standard_normal((50, 4))
        Mu = g.standard_normal((50, 3))
        X, _ = normalized_design(Phi, Mu, np.ones(50))
        assert np.linalg.norm(X, 2) <= 1.0 + 1e-9
