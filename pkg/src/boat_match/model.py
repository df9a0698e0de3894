"""
Bayesian logistic regression of treatment assignment.

    alpha ~ N(0, lambda_alpha)
    beta_i ~ N(0, lambda_beta)
    y_n ~ Bernoulli(sigmoid(alpha + beta . x_n))

The log posterior is unnormalised (the evidence is dropped). The Bernoulli terms go through ``scipy.special.log_expit``
so large logits neither overflow nor round to log(0).

Parameters may be passed as a ``ParamVector`` or as a flat array ``[alpha, beta_1, ..., beta_I]``.
"""
import math
from typing import Tuple, Union

import numpy as np
from scipy.special import expit, log_expit

from boat_match.records import Dataset, ParamVector, Priors

Params = Union[ParamVector, np.ndarray]
LOG_2PI = math.log(2.0 * math.pi)


def as_theta(params: Params) -> np.ndarray:
    if isinstance(params, ParamVector):
        return params.as_array()
    return np.asarray(params, dtype=float)


def _prior_variances(dim: int, priors: Priors) -> np.ndarray:
    variances = np.full(dim, priors.lambda_beta, dtype=float)
    variances[0] = priors.lambda_alpha
    return variances


def log_prior(params: Params, priors: Priors) -> float:
    """
    Sum of the normalised Gaussian log densities of alpha and every beta_i.
    """
    theta = as_theta(params)
    variances = _prior_variances(theta.shape[0], priors)
    return float(np.sum(-0.5 * (LOG_2PI + np.log(variances)) - 0.5 * theta**2 / variances))


def linear_predictor(params: Params, X: np.ndarray) -> np.ndarray:
    theta = as_theta(params)
    return theta[0] + np.asarray(X, dtype=float) @ theta[1:]


def propensity(params: Params, x: np.ndarray) -> Union[float, np.ndarray]:
    """
    Propensity score sigmoid(alpha + beta . x).

    Parameters:
    params: regression parameters.
    x: a single covariate vector (returns a float) or an N x I matrix (returns a length-N array).
    """
    x = np.asarray(x, dtype=float)
    eta = linear_predictor(params, x)
    if x.ndim == 1:
        return float(expit(eta))
    return expit(eta)


def log_likelihood(params: Params, data: Dataset) -> float:
    eta = linear_predictor(params, data.X)
    return float(np.sum(data.y * log_expit(eta) + (1.0 - data.y) * log_expit(-eta)))


def log_posterior(params: Params, data: Dataset, priors: Priors) -> float:
    """
    Unnormalised log posterior: log prior plus the Bernoulli log likelihood of the treatment indicator.
    """
    return log_prior(params, priors) + log_likelihood(params, data)


def grad_log_posterior(params: Params, data: Dataset, priors: Priors) -> np.ndarray:
    """
    Analytic gradient: d/dalpha = sum(y - p) - alpha/lambda_alpha, d/dbeta_i = sum((y - p) x_i) - beta_i/lambda_beta.
    """
    return log_posterior_and_grad(params, data, priors)[1]


def log_posterior_and_grad(params: Params, data: Dataset, priors: Priors) -> Tuple[float, np.ndarray]:
    theta = as_theta(params)
    eta = theta[0] + data.X @ theta[1:]
    residual = data.y - expit(eta)
    variances = _prior_variances(theta.shape[0], priors)

    value = float(
        np.sum(-0.5 * (LOG_2PI + np.log(variances)) - 0.5 * theta**2 / variances)
        + np.sum(data.y * log_expit(eta) + (1.0 - data.y) * log_expit(-eta))
    )
    grad = np.empty_like(theta)
    grad[0] = residual.sum()
    grad[1:] = data.X.T @ residual
    grad -= theta / variances
    return value, grad


class LogisticPosterior:
    """
    The posterior of one dataset under fixed priors, exposed as plain callables over flat parameter arrays.
    Instances hold read-only references and can be shared between chains.
    """

    def __init__(self, data: Dataset, priors: Priors):
        self.data = data
        self.priors = priors

    @property
    def dim(self) -> int:
        return 1 + self.data.n_covariates

    def log_density(self, theta: np.ndarray) -> float:
        return log_posterior(theta, self.data, self.priors)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return grad_log_posterior(theta, self.data, self.priors)

    def value_and_grad(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        return log_posterior_and_grad(theta, self.data, self.priors)

    def prior_draw(self, rng: np.random.Generator) -> np.ndarray:
        sd = np.sqrt(_prior_variances(self.dim, self.priors))
        return rng.normal(0.0, sd)
