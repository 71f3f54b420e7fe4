import numpy as np
import pytest

from conftest import FIG1_J, random_tanh_net
from lapkit.curvature import CurvEstimate
from lapkit.errors import DomainError
from lapkit.nets import Dense, ModelSpec
from lapkit.posterior import Hyperparams, posterior_fn
from lapkit.pushforward import (
    Ensemble,
    ensemble_predict,
    ensemble_stats,
    linear_pushforward,
    nonlinear_pushforward,
)
from lapkit.trees import flatten


def linear_model_1d(theta=0.5):
    return (
        ModelSpec((Dense(1, 1, bias=False),), 1, 1),
        {"dense_0": {"w": np.array([[theta]])}},
    )


class TestLinearPushforward:
    def test_all_masked_posterior_gives_zero_cov(self):
        model, params = random_tanh_net(0)
        state = posterior_fn(CurvEstimate.diagonal(np.zeros(0)), Hyperparams(1.0))
        out = linear_pushforward(model, params, state, np.zeros(3), active=np.zeros(0, dtype=np.intp))
        np.testing.assert_array_equal(out.cov, np.zeros((2, 2)))

    def test_scalar_sandwich(self):
        model, params = linear_model_1d()
        v = 0.37  # posterior variance
        state = posterior_fn(CurvEstimate.full(np.array([[1.0 / v - 1.0]])), Hyperparams(1.0))
        x = 2.0
        out = linear_pushforward(model, params, state, np.array([x]))
        assert abs(out.cov[0, 0] - x * x * v) < 1e-12

    def test_figure1_dense_oracle(self, fig1_model, fig1_params):
        ggn = np.outer(FIG1_J, FIG1_J)
        state = posterior_fn(CurvEstimate.full(ggn), Hyperparams(0.2))
        out = linear_pushforward(fig1_model, fig1_params, state, np.array([1.0]))
        h = ggn + 0.2 * np.eye(2)
        oracle = FIG1_J @ np.linalg.solve(h, FIG1_J)
        assert abs(out.cov[0, 0] - oracle) < 1e-10
        assert abs(out.mean[0] - 0.6832198) < 1e-7

    def test_cov_symmetric_psd(self):
        model, params = random_tanh_net(1)
        m = np.random.default_rng(2).standard_normal((flatten(params).size, 3))
        est = CurvEstimate.full(m @ m.T)
        state = posterior_fn(est, Hyperparams(0.5))
        out = linear_pushforward(model, params, state, np.ones(3))
        np.testing.assert_allclose(out.cov, out.cov.T, atol=1e-9)
        eigs = np.linalg.eigvalsh(out.cov)
        assert eigs.min() >= -1e-8 * max(np.trace(out.cov), 1e-30)

    def test_variance_monotone_in_tau(self):
        model, params = random_tanh_net(3)
        m = np.random.default_rng(4).standard_normal((flatten(params).size, 6))
        est = CurvEstimate.full(m @ m.T)
        x = np.array([0.3, -0.7, 1.1])
        prev = None
        for tau in [0.01, 0.1, 1.0, 10.0]:
            state = posterior_fn(est, Hyperparams(tau))
            var = np.diag(linear_pushforward(model, params, state, x).cov)
            if prev is not None:
                assert np.all(var <= prev + 1e-12)
            prev = var


class TestNonlinearPushforward:
    def test_deterministic_posterior_all_rows_equal_mean(self):
        model, params = random_tanh_net(5)
        state = posterior_fn(CurvEstimate.diagonal(np.zeros(0)), Hyperparams(1.0))
        ens = nonlinear_pushforward(model, params, state, np.zeros(3), 6, seed=0,
                                    active=np.zeros(0, dtype=np.intp))
        from lapkit.nets import forward

        mean = forward(model, params, np.zeros(3))
        np.testing.assert_allclose(ens.samples, np.tile(mean, (6, 1)), atol=1e-14)

    def test_linear_model_mc_moments(self):
        model, params = linear_model_1d(theta=0.8)
        v = 0.25
        state = posterior_fn(CurvEstimate.full(np.array([[1.0 / v - 1.0]])), Hyperparams(1.0))
        x = 1.7
        ens = nonlinear_pushforward(model, params, state, np.array([x]), 100000, seed=9)
        stats = ensemble_stats(ens)
        assert abs(stats["mean"][0] - 0.8 * x) < 0.01
        assert abs(stats["cov"][0, 0] - x * x * v) / (x * x * v) < 0.03

    def test_same_seed_identical(self):
        model, params = random_tanh_net(6)
        est = CurvEstimate.diagonal(np.ones(flatten(params).size))
        state = posterior_fn(est, Hyperparams(1.0))
        a = nonlinear_pushforward(model, params, state, np.zeros(3), 50, seed=3)
        b = nonlinear_pushforward(model, params, state, np.zeros(3), 50, seed=3)
        assert a.samples.tobytes() == b.samples.tobytes()

    def test_matches_linear_for_linear_model(self):
        model, params = linear_model_1d(theta=-0.4)
        state = posterior_fn(CurvEstimate.full(np.array([[3.0]])), Hyperparams(1.0))
        x = np.array([0.9])
        gauss = linear_pushforward(model, params, state, x)
        ens = nonlinear_pushforward(model, params, state, x, 100000, seed=4)
        stats = ensemble_stats(ens)
        assert abs(stats["mean"][0] - gauss.mean[0]) < 0.01
        assert abs(stats["cov"][0, 0] - gauss.cov[0, 0]) / gauss.cov[0, 0] < 0.03

    def test_ensemble_predict_marginals_match(self):
        model, params = random_tanh_net(7)
        est = CurvEstimate.diagonal(np.full(flatten(params).size, 2.0))
        state = posterior_fn(est, Hyperparams(1.0))
        x = np.random.default_rng(8).standard_normal((4, 3))
        draws = ensemble_predict(model, params, state, x, 20000, seed=5)
        single = nonlinear_pushforward(model, params, state, x[2], 20000, seed=6)
        m_batch = draws[:, 2, :].mean(axis=0)
        m_single = single.samples.mean(axis=0)
        assert np.max(np.abs(m_batch - m_single)) < 0.05


class TestEnsembleStats:
    def test_constant_ensemble(self):
        ens = Ensemble(np.ones((5, 2)), seed=0)
        stats = ensemble_stats(ens)
        np.testing.assert_array_equal(stats["std"], np.zeros(2))

    def test_two_sample_hand_case(self):
        ens = Ensemble(np.array([[0.0], [2.0]]), seed=0)
        stats = ensemble_stats(ens)
        assert stats["mean"][0] == 1.0
        assert stats["cov"][0, 0] == 2.0  # unbiased: (1+1)/(2-1)

    def test_cov_psd(self):
        ens = Ensemble(np.random.default_rng(9).standard_normal((40, 3)), seed=0)
        eigs = np.linalg.eigvalsh(ensemble_stats(ens)["cov"])
        assert eigs.min() >= -1e-12

    def test_single_sample_rejected(self):
        with pytest.raises(DomainError):
            ensemble_stats(Ensemble(np.ones((1, 2)), seed=0))
