import math

import numpy as np
import pytest

from boat_match.model import (
    LogisticPosterior,
    grad_log_posterior,
    log_likelihood,
    log_posterior,
    log_posterior_and_grad,
    log_prior,
    propensity,
)
from boat_match.records import Dataset, ParamVector, Priors


def test_log_prior_at_origin():
    params = ParamVector(alpha=0.0, beta=[0.0])
    assert log_prior(params, Priors()) == pytest.approx(-math.log(2 * math.pi))


def test_log_prior_uses_variances():
    priors = Priors(lambda_alpha=4.0, lambda_beta=1.0)
    value = log_prior(np.array([2.0]), priors)
    assert value == pytest.approx(-0.5 * math.log(2 * math.pi * 4.0) - 0.5)


def test_log_likelihood_at_zero(logistic_data):
    assert log_likelihood(np.zeros(3), logistic_data) == pytest.approx(200 * math.log(0.5))


def test_propensity():
    params = ParamVector(alpha=0.5, beta=[0.0, 0.0])
    assert propensity(params, np.array([0.3, 0.9])) == pytest.approx(0.622459, abs=1e-6)
    scores = propensity(params, np.ones((3, 2)))
    assert scores.shape == (3,)


def test_log_posterior_is_finite_for_large_logits():
    data = Dataset(X=[[1.0], [1.0]], y=[0, 1])
    value = log_posterior(np.array([0.0, 800.0]), data, Priors())
    assert math.isfinite(value)


def test_gradient_matches_finite_differences(logistic_data, priors):
    theta = np.array([0.3, -0.7, 1.2])
    analytic = grad_log_posterior(theta, logistic_data, priors)
    h = 1e-6
    numeric = np.array(
        [
            (log_posterior(theta + h * e, logistic_data, priors) - log_posterior(theta - h * e, logistic_data, priors))
            / (2 * h)
            for e in np.eye(3)
        ]
    )
    assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-5)


def test_value_and_grad_agree(logistic_data, priors):
    theta = np.array([-0.1, 0.4, 0.2])
    value, grad = log_posterior_and_grad(theta, logistic_data, priors)
    assert value == pytest.approx(log_posterior(theta, logistic_data, priors))
    assert np.allclose(grad, grad_log_posterior(theta, logistic_data, priors))


def test_logistic_posterior(logistic_data, priors):
    posterior = LogisticPosterior(logistic_data, priors)
    assert posterior.dim == 3
    draw = posterior.prior_draw(np.random.default_rng(0))
    assert draw.shape == (3,)
    assert posterior.log_density(draw) == pytest.approx(log_posterior(draw, logistic_data, priors))


def test_gradient_on_random_instances():
    rng = np.random.default_rng(0)
    h = 1e-5
    for _ in range(100):
        n, dim = int(rng.integers(1, 51)), int(rng.integers(1, 6))
        data = Dataset(X=rng.random((n, dim)), y=rng.integers(0, 2, n))
        priors = Priors(lambda_alpha=float(rng.uniform(0.5, 4)), lambda_beta=float(rng.uniform(0.5, 4)))
        theta = rng.normal(size=dim + 1)
        analytic = grad_log_posterior(theta, data, priors)
        numeric = np.array(
            [
                (log_posterior(theta + h * e, data, priors) - log_posterior(theta - h * e, data, priors)) / (2 * h)
                for e in np.eye(dim + 1)
            ]
        )
        assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-6)


def test_log_posterior_at_zero_is_four_coin_flips_plus_prior():
    data = Dataset(X=[[0.1], [0.7], [0.3], [0.9]], y=[1, 0, 0, 1])
    value = log_posterior(np.zeros(2), data, Priors())
    assert value == pytest.approx(4 * math.log(0.5) - math.log(2 * math.pi))
    assert value == pytest.approx(-4.610466, abs=1e-6)


def test_log_posterior_is_permutation_invariant(logistic_data, priors):
    theta = np.array([0.2, -0.5, 0.8])
    order = np.random.default_rng(3).permutation(logistic_data.n)
    shuffled = Dataset(X=logistic_data.X[order], y=logistic_data.y[order])
    assert log_posterior(theta, shuffled, priors) == pytest.approx(log_posterior(theta, logistic_data, priors))
    two = Dataset(X=[[0.0], [0.0]], y=[1, 0])
    swapped = Dataset(X=[[0.0], [0.0]], y=[0, 1])
    assert log_likelihood(np.zeros(2), two) == pytest.approx(2 * math.log(0.5))
    assert log_posterior(np.zeros(2), two, priors) == log_posterior(np.zeros(2), swapped, priors)


def test_log_posterior_hand_summation():
    X = np.array([[0.2, 0.5], [0.9, 0.1], [0.4, 0.4]])
    y = np.array([1, 0, 1])
    theta = np.array([0.3, -1.2, 0.7])
    expected = -1.5 * math.log(2 * math.pi) - 0.5 * float(theta @ theta)
    for x_n, y_n in zip(X, y):
        p = 1 / (1 + math.exp(-(theta[0] + x_n @ theta[1:])))
        expected += math.log(p) if y_n else math.log(1 - p)
    assert log_posterior(theta, Dataset(X=X, y=y), Priors()) == pytest.approx(expected, abs=1e-10)


def test_propensity_values():
    x = np.array([0.4, 0.6])
    assert propensity(ParamVector(alpha=0.0, beta=[0.0, 0.0]), x) == 0.5
    assert propensity(ParamVector(alpha=2.0, beta=[0.0, 0.0]), x) == pytest.approx(0.880797, abs=1e-6)
    tiny = propensity(ParamVector(alpha=-50.0, beta=[0.0, 0.0]), x)
    assert 0.0 < tiny < 1e-20
    data = Dataset(X=[x], y=[1])
    assert math.isfinite(log_likelihood(np.array([-50.0, 0.0, 0.0]), data))


def test_propensity_of_negated_params_is_complement():
    rng = np.random.default_rng(8)
    for _ in range(20):
        theta = rng.normal(scale=3.0, size=4)
        x = rng.random(3)
        assert propensity(theta, x) + propensity(-theta, x) == pytest.approx(1.0)


def test_gradient_without_data_is_prior_gradient():
    data = Dataset(X=np.zeros((0, 2)), y=np.zeros(0))
    priors = Priors(lambda_alpha=2.0, lambda_beta=4.0)
    theta = np.array([1.0, -2.0, 3.0])
    assert np.allclose(grad_log_posterior(theta, data, priors), [-0.5, 0.5, -0.75])


def test_gradient_vanishes_on_balanced_data():
    data = Dataset(X=[[1.0, -0.5], [-1.0, 0.5], [0.5, 1.0], [-0.5, -1.0]], y=[1, 1, 0, 0])
    assert np.allclose(grad_log_posterior(np.zeros(3), data, Priors()), 0.0)
