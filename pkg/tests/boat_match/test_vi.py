import math

import numpy as np
import pytest
import torch
from scipy.stats import linregress
from torch.distributions import Normal

from boat_match.errors import VIDivergenceError
from boat_match.model import LogisticPosterior, log_posterior
from boat_match.records import Guide, VIConfig
from boat_match.vi import (
    TorchLogisticPosterior,
    elbo_estimate,
    fit_guide,
    fit_vi,
    guide_as_dict,
    guide_from_dict,
    loss_trace_frame,
    negative_elbo,
)


def normal_3_2(theta: torch.Tensor) -> torch.Tensor:
    return Normal(3.0, 2.0).log_prob(theta).sum(-1)


def test_guide_entropy():
    assert Guide.initial(1, scale=1.0).entropy() == pytest.approx(1.418939, abs=1e-6)


def test_elbo_estimate_matches_entropy_plus_mean():
    guide = Guide.initial(2, scale=1.0)
    value = elbo_estimate(guide, lambda t: 0.0, 10, np.random.default_rng(0))
    assert value == pytest.approx(guide.entropy())


def test_elbo_estimate_clamps_non_finite(caplog):
    guide = Guide.initial(1, scale=1.0)
    value = elbo_estimate(guide, lambda t: -np.inf if t[0] > 0 else 0.0, 200, np.random.default_rng(1))
    assert value == pytest.approx(guide.entropy())
    assert "clamped" in caplog.text


def test_fit_guide_recovers_normal():
    config = VIConfig(n_steps=6000, n_mc=64, learning_rate=0.01, seed=0)
    result = fit_guide(normal_3_2, 1, config)
    assert result.guide.mean[0] == pytest.approx(3.0, abs=0.1)
    assert result.guide.sd[0] == pytest.approx(2.0, abs=0.15)
    assert result.loss_trace.shape == (6000,)
    assert result.loss_trace[-500:].mean() < result.loss_trace[:50].mean()


def test_zero_steps_returns_initial_guide():
    result = fit_guide(normal_3_2, 2, VIConfig(n_steps=0))
    assert np.array_equal(result.guide.mean, np.zeros(2))
    assert np.allclose(result.guide.scale_factor, 0.1 * np.eye(2))
    assert result.loss_trace.size == 0


def test_fit_guide_is_deterministic():
    config = VIConfig(n_steps=200, n_mc=4, seed=9)
    first = fit_guide(normal_3_2, 2, config)
    second = fit_guide(normal_3_2, 2, config)
    assert np.array_equal(first.guide.mean, second.guide.mean)
    assert np.array_equal(first.loss_trace, second.loss_trace)


def test_mean_field_keeps_factor_diagonal():
    result = fit_guide(normal_3_2, 3, VIConfig(n_steps=100, mean_field=True))
    factor = result.guide.scale_factor
    assert np.array_equal(factor, np.diag(np.diag(factor)))


def test_non_finite_loss_raises():
    with pytest.raises(VIDivergenceError) as info:
        fit_guide(lambda theta: torch.full((theta.shape[0],), float("nan"), dtype=theta.dtype), 1, VIConfig(n_steps=5))
    assert info.value.step == 0
    assert info.value.exit_code == 1


def test_torch_log_posterior_matches_numpy(logistic_data, priors):
    theta = np.array([[0.2, -0.4, 0.9], [1.0, 0.0, -1.0]])
    values = TorchLogisticPosterior(logistic_data, priors)(torch.as_tensor(theta, dtype=torch.float64))
    expected = [log_posterior(row, logistic_data, priors) for row in theta]
    assert np.allclose(values.numpy(), expected)


@pytest.mark.slow
def test_fit_vi_close_to_map(logistic_data, priors):
    from scipy.optimize import minimize

    posterior = LogisticPosterior(logistic_data, priors)
    theta_map = minimize(lambda t: -posterior.log_density(t), np.zeros(3), jac=lambda t: -posterior.grad(t)).x
    result = fit_vi(logistic_data, priors, VIConfig(n_steps=5000, n_mc=8, learning_rate=0.01, seed=0))
    assert np.all(np.abs(result.guide.mean - theta_map) < 0.5 * result.guide.sd)
    assert result.names == ["alpha", "beta_1", "beta_2"]


def test_guide_serialisation():
    factor = np.array([[0.5, 0.0], [0.2, 0.3]])
    result = fit_guide(normal_3_2, 2, VIConfig(n_steps=0))
    result.guide = Guide(mean=np.array([1.0, -1.0]), scale_factor=factor)
    content = guide_as_dict(result)
    assert list(content["scale_tril"]) == [0.5, 0.2, 0.3]
    assert content["sd"] == pytest.approx([0.5, math.sqrt(0.13)])
    assert content["final_loss"] is None
    assert np.array_equal(guide_from_dict(content).scale_factor, factor)
    assert loss_trace_frame(result).empty


def test_elbo_of_exact_guide_is_zero():
    guide = Guide.initial(1, scale=1.0)
    log_density = lambda t: float(-0.5 * t @ t - 0.5 * math.log(2 * math.pi))  # noqa: E731
    assert abs(elbo_estimate(guide, log_density, 10000, np.random.default_rng(0))) < 0.05


def test_elbo_bounds_log_evidence():
    # theta ~ N(0, 1), x | theta ~ N(theta, 1), observed x = 1: evidence N(1; 0, 2)
    def joint(t):
        return float(-0.5 * t[0] ** 2 - 0.5 * (1.0 - t[0]) ** 2 - math.log(2 * math.pi))

    log_evidence = -0.5 * math.log(4 * math.pi) - 0.25
    rng = np.random.default_rng(1)
    for _ in range(100):
        guide = Guide(mean=[rng.uniform(-2, 2)], scale_factor=[[rng.uniform(0.2, 2.0)]])
        assert elbo_estimate(guide, joint, 4000, rng) <= log_evidence + 0.05


def test_reparameterised_gradient_matches_finite_differences(logistic_data, priors):
    posterior = LogisticPosterior(logistic_data, priors)
    mean = np.array([0.2, -0.3, 0.5])
    factor = np.array([[0.4, 0.0, 0.0], [0.1, 0.3, 0.0], [-0.2, 0.05, 0.5]])
    n_mc = 2000
    eps = np.random.default_rng(17).standard_normal((n_mc, 3))

    mean_t = torch.tensor(mean, requires_grad=True)
    factor_t = torch.tensor(factor, requires_grad=True)
    loss, _ = negative_elbo(mean_t, factor_t, TorchLogisticPosterior(logistic_data, priors), torch.as_tensor(eps))
    loss.backward()

    def elbo(m, f):
        return elbo_estimate(Guide(mean=m, scale_factor=f), posterior.log_density, n_mc, np.random.default_rng(17))

    h = 1e-5
    for i in range(3):
        e = np.eye(3)[i] * h
        numeric = (elbo(mean + e, factor) - elbo(mean - e, factor)) / (2 * h)
        assert -mean_t.grad[i].item() == pytest.approx(numeric, rel=1e-2, abs=1e-6)
    for i, j in zip(*np.tril_indices(3)):
        e = np.zeros((3, 3))
        e[i, j] = h
        numeric = (elbo(mean, factor + e) - elbo(mean, factor - e)) / (2 * h)
        assert -factor_t.grad[i, j].item() == pytest.approx(numeric, rel=1e-2, abs=1e-6)


def test_loss_trace_settles():
    config = VIConfig(n_steps=6000, n_mc=64, learning_rate=0.01, seed=3)
    trace = fit_guide(normal_3_2, 1, config).loss_trace
    assert np.all(np.isfinite(trace))
    tail = trace[-600:]
    assert tail.mean() < trace[:600].mean()
    fit = linregress(np.arange(tail.size), tail)
    assert abs(fit.slope * tail.size) < 0.05
