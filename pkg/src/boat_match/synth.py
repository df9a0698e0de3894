"""
Synthetic studies with known confounding and a known treatment effect.

``generate_from_prior`` is the prior-predictive process of the assignment model: draw alpha and beta from their priors,
then one Bernoulli treatment indicator per covariate row.

``generate_study`` builds a whole unit-level study. Units are drawn one at a time (in vectorised batches) with
covariates in [0, 1], assigned by the logistic model, and kept only while their group still has room, which yields
the exact requested group sizes. The target depends on the covariates through ``outcome_beta`` and on the treatment
through ``tau``; covariates carrying weight in both ``true_beta`` and ``outcome_beta`` confound the naive comparison.
"""
from typing import Tuple

import numpy as np
from scipy.special import expit, ndtr

from boat_match.config import stage_rng
from boat_match.errors import InputError
from boat_match.log import log
from boat_match.records import COVARIATES, TARGET, FeatureMatrix, GroundTruth, ParamVector, Priors, SynthConfig

BATCH_SIZE = 4096


def generate_from_prior(priors: Priors, X: np.ndarray, rng: np.random.Generator) -> Tuple[ParamVector, np.ndarray]:
    """
    alpha ~ N(0, lambda_alpha), beta_i ~ N(0, lambda_beta), y_n ~ Bernoulli(sigmoid(alpha + beta . x_n)).

    Returns:
    (ParamVector, y): the drawn parameters and the 0/1 treatment vector.
    """
    X = np.asarray(X, dtype=float)
    alpha = rng.normal(0.0, np.sqrt(priors.lambda_alpha))
    beta = rng.normal(0.0, np.sqrt(priors.lambda_beta), size=X.shape[1])
    params = ParamVector(alpha=alpha, beta=beta)
    y = (rng.random(X.shape[0]) < expit(alpha + X @ beta)).astype(int)
    return params, y


def covariate_names(n_covariates: int) -> Tuple[str, ...]:
    if n_covariates == len(COVARIATES):
        return COVARIATES
    return tuple(f"x{i}" for i in range(1, n_covariates + 1))


def _draw_covariates(rng: np.random.Generator, n: int, config: SynthConfig) -> np.ndarray:
    """Uniform(0,1) covariates; with ``copula_rho`` > 0 they are equicorrelated through a Gaussian copula."""
    if config.copula_rho == 0.0:
        return rng.random((n, config.n_covariates))
    rho = config.copula_rho
    shared = rng.standard_normal((n, 1))
    own = rng.standard_normal((n, config.n_covariates))
    return ndtr(np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * own)


def _assign_exact(config: SynthConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Draws units until both quotas are filled.

    Returns:
    (X, y, rounds): kept units in draw order and the number of units drawn.

    Raises:
    InputError: when ``max_rounds`` draws do not fill the quotas.
    """
    need = {0: config.n_control, 1: config.n_treated}
    kept_x, kept_y = [], []
    rounds = 0
    beta = config.assignment_beta
    while need[0] or need[1]:
        if rounds >= config.max_rounds:
            raise InputError(
                f"could not fill {config.n_control} control / {config.n_treated} treated units in {config.max_rounds} "
                f"draws (still missing {need[0]} control, {need[1]} treated); use a weaker true_beta or true_alpha"
            )
        size = min(BATCH_SIZE, config.max_rounds - rounds)
        x = _draw_covariates(rng, size, config)
        y = (rng.random(size) < expit(config.true_alpha + x @ beta)).astype(int)
        for i in range(size):
            rounds += 1
            group = int(y[i])
            if need[group]:
                need[group] -= 1
                kept_x.append(x[i])
                kept_y.append(group)
                if not (need[0] or need[1]):
                    break
    X = np.array(kept_x).reshape(len(kept_x), config.n_covariates)
    return X, np.array(kept_y, dtype=int), rounds


def generate_study(config: SynthConfig) -> Tuple[FeatureMatrix, GroundTruth]:
    """
    Generates a confounded study with exactly ``n_control`` / ``n_treated`` units.

    Covariates are left as drawn (already in [0, 1]); the target is min-max scaled and the treatment effect is
    reported both in raw and in scaled units.

    Returns:
    (FeatureMatrix, GroundTruth)
    """
    rng = stage_rng(config.seed, "simulate")
    X, y, rounds = _assign_exact(config, rng)
    noise = rng.normal(0.0, config.noise_sd, size=y.shape[0]) if config.noise_sd > 0 else np.zeros(y.shape[0])
    target = X @ config.target_beta + config.tau * y + noise

    low, high = float(target.min()), float(target.max())
    if high > low:
        scaled_target = (target - low) / (high - low)
        tau_scaled = config.tau / (high - low)
    else:
        log.warning("synthetic target is constant; scaled target set to 0.0")
        scaled_target = np.zeros_like(target)
        tau_scaled = 0.0

    columns = covariate_names(config.n_covariates)
    params = {name: (0.0, 1.0) for name in columns}
    params[TARGET] = (low, high)
    features = FeatureMatrix(
        unit_ids=[f"u{i:05d}" for i in range(y.shape[0])],
        groups=y,
        target=scaled_target,
        X=X,
        columns=columns,
        scaling_params=params,
        scaled=True,
    )
    truth = GroundTruth(
        true_alpha=config.true_alpha,
        true_beta=tuple(float(b) for b in config.assignment_beta),
        outcome_beta=tuple(float(b) for b in config.target_beta),
        tau_raw=config.tau,
        tau_scaled=float(tau_scaled),
        target_min=low,
        target_max=high,
        seed=config.seed,
        rounds=rounds,
    )
    log.info(f"synthetic study: {config.n_control} control, {config.n_treated} treated, {rounds} units drawn")
    return features, truth
