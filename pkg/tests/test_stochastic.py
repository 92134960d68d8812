import numpy as np
import pytest
from scipy import integrate

from alflb.core import AffinityMatrix, BiasVector, ProblemDims, RandomSource
from alflb.deterministic import lagrangian
from alflb.distributions import (
    AffinityDistributionSet,
    BetaScore,
    UniformScore,
    identical,
)
from alflb.errors import InvalidRange, TooManyTerms
from alflb.router import route_topk
from alflb.stochastic import (
    EdgeWeights,
    check_gradient_moments,
    edge_weights_quadrature,
    expected_loss,
    expected_loss_minimizer,
    loss_gradient,
    online_loss,
    pi_monte_carlo,
    pi_quadrature,
    regret_experiment,
    sigma_squared,
    strong_convexity_estimate,
)
from conftest import random_affinities


def test_sigma_squared_plugin():
    assert sigma_squared(8, 4, 2) == pytest.approx(64.0)
    assert sigma_squared(64, 8, 2) == pytest.approx(6144.0)
    assert sigma_squared(10, 5, 5) == pytest.approx(0.0)  # K=E is deterministic


class TestOnlineLoss:
    def test_hand_instance(self):
        gamma = AffinityMatrix(ProblemDims(T=1, E=2, K=1), np.array([[0.9, 0.1]]))
        p = BiasVector(np.array([0.0, 0.05]))
        assert online_loss(gamma, p, 1, 0.5) == pytest.approx(0.875, abs=1e-15)

    def test_equals_deterministic_lagrangian_k1(self):
        rng = np.random.default_rng(0)
        for seed in range(30):
            gamma = random_affinities(16, 4, seed=seed)
            p = BiasVector(rng.uniform(-0.1, 0.1, size=4))
            got = online_loss(gamma, p, 1, 4.0)
            out = route_topk(gamma, p, 1)
            want = lagrangian(gamma, out.assignment, p, 4.0).value
            assert got == want  # same code path, bitwise

    def test_uniform_shift_cancels_at_balanced_target(self):
        gamma = random_affinities(12, 4, seed=31, K=2)
        L = 2 * 12 / 4
        base = online_loss(gamma, BiasVector.zeros(4), 2, L)
        for c in (0.4, -2.0):
            val = online_loss(gamma, BiasVector(np.full(4, c)), 2, L)
            assert val == pytest.approx(base, abs=1e-9)


class TestLossGradient:
    def test_balanced_gives_zero(self):
        gamma = AffinityMatrix(
            ProblemDims(T=2, E=2, K=1), np.array([[0.9, 0.1], [0.2, 0.8]])
        )
        g = loss_gradient(gamma, BiasVector.zeros(2), 1, 1.0)
        np.testing.assert_array_equal(g, [0.0, 0.0])

    def test_all_on_expert_zero(self):
        T, E = 8, 4
        vals = np.full((T, E), 0.1)
        vals[:, 0] = 0.7
        gamma = AffinityMatrix(ProblemDims(T=T, E=E, K=1), vals)
        g = loss_gradient(gamma, BiasVector.zeros(E), 1, 2.0)
        np.testing.assert_array_equal(g, [T - 2.0, -2.0, -2.0, -2.0])

    def test_components_sum_to_zero(self):
        for seed in range(20):
            gamma = random_affinities(24, 6, seed=seed, K=2)
            p = BiasVector(np.random.default_rng(seed).uniform(-0.1, 0.1, 6))
            g = loss_gradient(gamma, p, 2, 2 * 24 / 6)
            assert abs(g.sum()) <= 1e-9


class TestPiQuadrature:
    def test_two_identical_uniforms_symmetric(self):
        ds = identical(UniformScore(0.0, 1.0), 2)
        pi = pi_quadrature(ds, BiasVector.zeros(2), 1)
        np.testing.assert_allclose(pi.pi, 0.5, atol=1e-8)

    def test_four_identical_betas_topk2(self):
        ds = identical(BetaScore(2.0, 2.0), 4)
        pi = pi_quadrature(ds, BiasVector.zeros(4), 2)
        np.testing.assert_allclose(pi.pi, 0.5, atol=1e-8)

    def test_shifted_uniform_analytic(self):
        # P(U + d > U') = 1 - (1-d)^2/2 for two standard uniforms
        ds = identical(UniformScore(0.0, 1.0), 2)
        d = 0.3
        pi = pi_quadrature(ds, BiasVector(np.array([d, 0.0])), 1)
        assert pi.pi[0] == pytest.approx(1.0 - (1.0 - d) ** 2 / 2.0, abs=1e-7)
        assert pi.pi[1] == pytest.approx((1.0 - d) ** 2 / 2.0, abs=1e-7)

    def test_normalization(self):
        ds = AffinityDistributionSet(
            (BetaScore(2.0, 4.0), UniformScore(0.1, 0.8), BetaScore(3.0, 1.5))
        )
        for K in (1, 2):
            pi = pi_quadrature(ds, BiasVector(np.array([0.05, 0.0, -0.05])), K)
            assert abs(pi.pi.sum() - K) <= 1e-6

    def test_matches_monte_carlo(self):
        ds = identical(UniformScore(0.0, 1.0), 3)
        p = BiasVector(np.array([0.2, 0.0, -0.2]))
        pi_q = pi_quadrature(ds, p, 1)
        rng = RandomSource(42, 5).generator()
        pi_mc, se = pi_monte_carlo(ds, p, 1, samples=200_000, rng=rng)
        assert np.all(np.abs(pi_q.pi - pi_mc.pi) <= 4 * se)

    def test_enumeration_guard(self):
        ds = identical(BetaScore(1.0, 1.0), 30)
        with pytest.raises(TooManyTerms):
            pi_quadrature(ds, BiasVector.zeros(30), 15)


class TestPiMonteCarlo:
    def test_sum_is_exactly_k(self):
        ds = identical(BetaScore(2.0, 2.0), 5)
        rng = RandomSource(3, 5).generator()
        pi, _ = pi_monte_carlo(ds, BiasVector.zeros(5), 2, samples=5000, rng=rng)
        assert pi.pi.sum() == pytest.approx(2.0, abs=1e-12)

    def test_minimum_sample_count(self):
        ds = identical(BetaScore(2.0, 2.0), 2)
        with pytest.raises(InvalidRange):
            pi_monte_carlo(ds, BiasVector.zeros(2), 1, samples=10,
                           rng=np.random.default_rng(0))


class TestGradientMoments:
    def test_plugin_formulas_identical_dists(self):
        # E=4, K=2, T=8, p=0: pi = 0.5 so the variance formula gives
        # 8*(2 - 4*0.25) = 8 and the second moment 64*(1 - 1) + 8 = 8
        ds = identical(BetaScore(2.0, 2.0), 4)
        rng = RandomSource(4, 6).generator()
        report = check_gradient_moments(
            ds, BiasVector.zeros(4), 2, 8, replicas=4000, rng=rng
        )
        assert report.expected_var == pytest.approx(8.0, abs=1e-6)
        assert report.expected_second_moment == pytest.approx(8.0, abs=1e-6)
        np.testing.assert_allclose(report.expected_mean, 0.0, atol=1e-6)
        assert report.max_abs_z <= 4.0

    def test_heterogeneous_config(self):
        ds = AffinityDistributionSet(
            (BetaScore(2.0, 3.0), BetaScore(3.0, 2.0), UniformScore(0.1, 0.9))
        )
        rng = RandomSource(5, 6).generator()
        report = check_gradient_moments(
            ds, BiasVector(np.array([0.05, -0.05, 0.0])), 1, 12,
            replicas=4000, rng=rng,
        )
        assert report.max_abs_z <= 4.0


class TestEdgeWeights:
    def test_container_validation(self):
        with pytest.raises(InvalidRange):
            EdgeWeights(np.array([[0.0, 1.0], [2.0, 0.0]]))  # asymmetric
        with pytest.raises(InvalidRange):
            EdgeWeights(np.array([[0.5, 1.0], [1.0, 0.0]]))  # diagonal
        with pytest.raises(InvalidRange):
            EdgeWeights(np.array([[0.0, -1.0], [-1.0, 0.0]]))  # negative

    def test_quadratic_form_matches_double_loop(self):
        rng = np.random.default_rng(6)
        E = 5
        m = np.abs(rng.standard_normal((E, E)))
        m = 0.5 * (m + m.T)
        np.fill_diagonal(m, 0.0)
        w = EdgeWeights(m)
        delta = rng.standard_normal(E)
        want = sum(
            m[k, l] * (delta[k] - delta[l]) ** 2
            for k in range(E)
            for l in range(k + 1, E)
        )
        assert w.quadratic_form(delta) == pytest.approx(want, abs=1e-12)

    def test_zero_sum_identity_uniform_weights(self):
        # with all w_kl = 1 the form is sum_{k<l}(d_k-d_l)^2 = E ||d||^2
        # for zero-sum d
        rng = np.random.default_rng(7)
        for E in (2, 3, 5, 8):
            ones = np.ones((E, E)) - np.eye(E)
            w = EdgeWeights(ones)
            for _ in range(20):
                d = rng.standard_normal(E)
                d -= d.mean()
                lhs = w.quadratic_form(d)
                rhs = E * float(d @ d)
                assert abs(lhs - rhs) <= 1e-12 * max(1.0, rhs)

    def test_two_expert_reduction(self):
        # E=2, K=1: the rival product is empty, so
        # w_01 = int phi_0(v - p_0) phi_1(v - p_1) dv
        ds = AffinityDistributionSet((BetaScore(2.0, 2.0), BetaScore(3.0, 1.5)))
        p = np.array([0.1, -0.1])
        w = edge_weights_quadrature(ds, BiasVector(p), 1)
        want, _ = integrate.quad(
            lambda v: ds.dists[0].pdf(v - p[0]) * ds.dists[1].pdf(v - p[1]),
            p[1], 1.0 + p[1], limit=200,
        )
        assert w.w[0, 1] == pytest.approx(want, rel=1e-6)
        assert w.w[0, 1] == w.w[1, 0]

    def test_finite_difference_identity(self):
        ds = AffinityDistributionSet(
            (BetaScore(2.0, 3.0), BetaScore(2.5, 2.5), BetaScore(3.0, 2.0),
             UniformScore(0.05, 0.95))
        )
        p = BiasVector(np.array([0.04, -0.02, 0.0, -0.02]))
        K = 2
        w = edge_weights_quadrature(ds, p, K)
        rng = np.random.default_rng(8)
        h = 1e-3
        for _ in range(5):
            delta = rng.standard_normal(4)
            delta -= delta.mean()
            delta /= np.linalg.norm(delta)
            quad_form = w.quadratic_form(delta)
            plus = pi_quadrature(ds, BiasVector(p.values + h * delta), K).pi
            minus = pi_quadrature(ds, BiasVector(p.values - h * delta), K).pi
            fd = float(delta @ (plus - minus)) / (2 * h)
            assert quad_form == pytest.approx(fd, rel=1e-3)


class TestStrongConvexity:
    def test_kappa_one_is_singleton_domain(self):
        ds = identical(BetaScore(2.0, 2.0), 3)
        rng = np.random.default_rng(9)
        est = strong_convexity_estimate(ds, 1, kappa=1.0, T=8, grid_points=5, rng=rng)
        w0 = edge_weights_quadrature(ds, BiasVector.zeros(3), 1)
        assert est.c_hat == pytest.approx(w0.min_offdiag(), abs=1e-12)
        assert est.mu == pytest.approx(8 * est.c_hat * 3)
        np.testing.assert_array_equal(est.argmin_p, 0.0)

    def test_positive_for_positive_densities(self):
        ds = identical(BetaScore(1.5, 1.5), 3)
        rng = np.random.default_rng(10)
        est = strong_convexity_estimate(ds, 1, kappa=0.7, T=8, grid_points=10, rng=rng)
        assert est.c_hat > 0.0

    def test_kappa_validated(self):
        ds = identical(BetaScore(2.0, 2.0), 2)
        with pytest.raises(InvalidRange):
            strong_convexity_estimate(ds, 1, kappa=0.0, T=8, grid_points=4,
                                      rng=np.random.default_rng(0))


class TestExpectedLossMinimizer:
    def test_identical_distributions_give_zero(self):
        ds = identical(BetaScore(2.0, 2.0), 4)
        p_star = expected_loss_minimizer(ds, 2, 8, 4.0)
        assert np.abs(p_star.values).max() <= 1e-9

    def test_two_expert_equal_width_uniforms(self):
        # X1 ~ U(0.1, 0.9), X2 ~ U(0.2, 1.0): same width, offset 0.1, so
        # the biases must exactly cancel the offset: p* = (0.05, -0.05)
        ds = AffinityDistributionSet((UniformScore(0.1, 0.9), UniformScore(0.2, 1.0)))
        p_star = expected_loss_minimizer(ds, 1, 8, 4.0)
        np.testing.assert_allclose(p_star.values, [0.05, -0.05], atol=1e-5)
        assert abs(p_star.values.sum()) <= 1e-12

    def test_first_order_condition(self):
        ds = AffinityDistributionSet(
            (BetaScore(2.0, 3.0), BetaScore(2.5, 2.5), BetaScore(3.0, 2.0))
        )
        T, K = 12, 1
        L = K * T / 3
        p_star = expected_loss_minimizer(ds, K, T, L)
        pi = pi_quadrature(ds, p_star, K)
        np.testing.assert_allclose(T * pi.pi, L, atol=1e-6 * T)

    def test_minimum_beats_nearby_points(self):
        ds = AffinityDistributionSet((BetaScore(2.0, 4.0), BetaScore(4.0, 2.0)))
        T, K = 8, 1
        p_star = expected_loss_minimizer(ds, K, T, 4.0)
        f_star = expected_loss(ds, p_star, K, T, 4.0)
        rng = np.random.default_rng(11)
        for _ in range(5):
            d = rng.standard_normal(2)
            d -= d.mean()
            d *= 0.05 / np.abs(d).max()
            f_near = expected_loss(ds, BiasVector(p_star.values + d), K, T, 4.0)
            assert f_near >= f_star - 1e-9


class TestRegretExperiment:
    def test_start_at_optimum_gap_near_zero(self):
        ds = identical(BetaScore(2.0, 2.0), 4)
        T, K = 8, 2
        rng = RandomSource(12, 7).generator()
        acct = regret_experiment(
            ds, T, K, mu=1e6, p_star=BiasVector.zeros(4),
            rounds=100, replicas=64, rng=rng,
        )
        mean = float(acct.final_per_replica.mean())
        se = float(acct.final_per_replica.std(ddof=1)) / np.sqrt(64)
        assert abs(mean) <= 4 * se + 1e-6
        assert acct.sigma2 == pytest.approx(sigma_squared(T, 4, K))

    def test_bound_curve_shape(self):
        ds = identical(BetaScore(2.0, 2.0), 4)
        rng = RandomSource(13, 7).generator()
        acct = regret_experiment(
            ds, 8, 1, mu=50.0, p_star=BiasVector.zeros(4),
            rounds=50, replicas=8, rng=rng,
        )
        want = sigma_squared(8, 4, 1) / (2 * 50.0) * (1 + np.log(np.arange(1, 51)))
        np.testing.assert_allclose(acct.bound, want, atol=1e-12)
        assert acct.mean_cum_regret.shape == (50,)
        assert acct.mean_diam.shape == (50,)
