"""
Stochastic variational inference with a multivariate normal guide.

The guide is q = N(m, L L^T) with L lower triangular. Its diagonal is stored as a log so it stays positive under
unconstrained optimisation. Each step draws ``n_mc`` standard normals eps, forms theta = m + L eps (the
reparameterisation), and ascends

    ELBO = mean_s log p(theta_s, data) + entropy(q)

with Adam. Randomness comes from a ``torch.Generator`` seeded from the run seed, so a fit is reproducible.
"""
import math
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from attrs import define, field
from torch.distributions import Bernoulli, MultivariateNormal, Normal

from boat_match.config import stage_seed
from boat_match.errors import InputError, VIDivergenceError
from boat_match.log import log
from boat_match.records import Dataset, Guide, Priors, VIConfig, param_names

TorchLogProb = Callable[[torch.Tensor], torch.Tensor]
DTYPE = torch.float64
LOG_EVERY = 5000


def _clamp_non_finite(values: np.ndarray) -> Tuple[np.ndarray, int]:
    """
    Replaces non-finite log densities with the lowest finite value in the batch. Returns the clamped values and how
    many were replaced; an all-non-finite batch is returned as is.
    """
    finite = np.isfinite(values)
    n_bad = int((~finite).sum())
    if n_bad == 0 or n_bad == values.shape[0]:
        return values, n_bad
    return np.where(finite, values, values[finite].min()), n_bad


def elbo_estimate(
    guide: Guide,
    log_post_fn: Callable[[np.ndarray], float],
    n_mc: int,
    rng: np.random.Generator,
) -> float:
    """
    Monte-Carlo ELBO of a guide against an unnormalised log density.

    Parameters:
    guide (Guide): the variational distribution.
    log_post_fn: log density of a single parameter vector.
    n_mc (int): number of reparameterised samples.
    rng: source of the standard normal draws.

    Returns:
    float: mean log density over the samples plus the guide entropy.
    """
    if n_mc <= 0:
        raise ValueError(f"n_mc must be positive, got {n_mc}")
    eps = rng.standard_normal((n_mc, guide.dim))
    theta = guide.mean + eps @ guide.scale_factor.T
    values = np.array([log_post_fn(t) for t in theta], dtype=float)
    values, n_bad = _clamp_non_finite(values)
    if n_bad:
        log.warning(f"{n_bad} of {n_mc} ELBO samples had a non-finite log density and were clamped")
    return float(values.mean()) + guide.entropy()


class TorchLogisticPosterior:
    """
    The assignment-model log posterior over a batch of parameter rows, in torch so autograd can differentiate it.
    """

    def __init__(self, data: Dataset, priors: Priors):
        self.X = torch.as_tensor(data.X, dtype=DTYPE)
        self.y = torch.as_tensor(data.y, dtype=DTYPE)
        variances = np.full(1 + data.n_covariates, priors.lambda_beta)
        variances[0] = priors.lambda_alpha
        self.prior = Normal(torch.zeros(len(variances), dtype=DTYPE), torch.as_tensor(np.sqrt(variances), dtype=DTYPE))

    def __call__(self, theta: torch.Tensor) -> torch.Tensor:
        logits = theta[:, :1] + theta[:, 1:] @ self.X.T
        log_lik = Bernoulli(logits=logits).log_prob(self.y.expand_as(logits)).sum(-1)
        return self.prior.log_prob(theta).sum(-1) + log_lik


@define
class VIResult:
    guide: Guide
    loss_trace: np.ndarray = field(factory=lambda: np.empty(0))
    clamped: int = 0
    names: List[str] = field(factory=list)


class _GuideParams:
    """Unconstrained torch parameters of the guide."""

    def __init__(self, dim: int, init_scale: float, mean_field: bool):
        self.mean = torch.zeros(dim, dtype=DTYPE, requires_grad=True)
        self.log_diag = torch.full((dim,), math.log(init_scale), dtype=DTYPE, requires_grad=True)
        self.off_diag = torch.zeros((dim, dim), dtype=DTYPE, requires_grad=not mean_field)
        self.mask = torch.tril(torch.ones((dim, dim), dtype=DTYPE), diagonal=-1)

    def parameters(self) -> List[torch.Tensor]:
        return [p for p in (self.mean, self.log_diag, self.off_diag) if p.requires_grad]

    def scale_tril(self) -> torch.Tensor:
        return self.off_diag * self.mask + torch.diag(torch.exp(self.log_diag))

    def guide(self) -> Guide:
        with torch.no_grad():
            return Guide(mean=self.mean.detach().numpy().copy(), scale_factor=self.scale_tril().numpy().copy())


def negative_elbo(
    mean: torch.Tensor, scale_tril: torch.Tensor, log_prob: TorchLogProb, eps: torch.Tensor
) -> Tuple[torch.Tensor, int]:
    """
    Reparameterised negative ELBO for fixed standard normal draws ``eps`` (S x dim), differentiable in ``mean`` and
    ``scale_tril``. Non-finite log densities are clamped to the batch minimum.

    Returns:
    (loss, number of clamped samples)
    """
    values = log_prob(mean + eps @ scale_tril.T)
    finite = torch.isfinite(values)
    n_bad = int((~finite).sum())
    if 0 < n_bad < values.shape[0]:
        values = torch.where(finite, values, values[finite].min().detach())
    entropy = MultivariateNormal(mean, scale_tril=scale_tril).entropy()
    return -(values.mean() + entropy), n_bad


def fit_guide(log_prob: TorchLogProb, dim: int, config: VIConfig, names: Optional[List[str]] = None) -> VIResult:
    """
    Fits a multivariate normal guide to any batched torch log density on R^dim.

    Parameters:
    log_prob: maps an (S, dim) tensor of parameter rows to their S log densities.
    dim (int): parameter dimension.
    config (VIConfig): optimiser settings; ``n_steps=0`` returns the initial guide.

    Returns:
    VIResult: final guide, per-step loss (negative ELBO) and the number of clamped samples.

    Raises:
    VIDivergenceError: when the loss becomes non-finite.
    """
    params = _GuideParams(dim, config.init_scale, config.mean_field)
    if config.n_steps == 0:
        return VIResult(guide=params.guide(), names=names or [])

    generator = torch.Generator().manual_seed(stage_seed(config.seed, "vi"))
    optimizer = torch.optim.Adam(params.parameters(), lr=config.learning_rate)
    loss_trace = np.empty(config.n_steps)
    clamped = 0
    for step in range(config.n_steps):
        optimizer.zero_grad()
        eps = torch.randn((config.n_mc, dim), generator=generator, dtype=DTYPE)
        loss, n_bad = negative_elbo(params.mean, params.scale_tril(), log_prob, eps)
        clamped += n_bad
        if not torch.isfinite(loss):
            raise VIDivergenceError(step)
        loss.backward()
        optimizer.step()
        loss_trace[step] = float(loss.detach())
        if (step + 1) % LOG_EVERY == 0:
            log.debug(f"VI step {step + 1}/{config.n_steps}: loss {loss_trace[step]:.4f}")

    if clamped:
        log.warning(f"{clamped} ELBO samples had a non-finite log density and were clamped")
    return VIResult(guide=params.guide(), loss_trace=loss_trace, clamped=clamped, names=names or [])


def fit_vi(data: Dataset, priors: Priors, config: VIConfig) -> VIResult:
    """
    Fits the guide to the assignment-model posterior.
    """
    data.check_groups()
    log.info(f"VI: {config.n_steps} Adam steps, {config.n_mc} samples per step, lr {config.learning_rate}")
    result = fit_guide(
        TorchLogisticPosterior(data, priors), 1 + data.n_covariates, config, names=param_names(data.n_covariates)
    )
    if result.loss_trace.size:
        log.info(f"VI done: final loss {result.loss_trace[-1]:.4f}")
    return result


def guide_as_dict(result: VIResult) -> Dict[str, object]:
    """JSON content for a fitted guide: mean, sd and the row-major lower triangle of the factor."""
    guide = result.guide
    rows, cols = np.tril_indices(guide.dim)
    return {
        "names": result.names or param_names(guide.dim - 1),
        "mean": guide.mean,
        "sd": guide.sd,
        "scale_tril": guide.scale_factor[rows, cols],
        "n_steps": int(result.loss_trace.size),
        "clamped_samples": result.clamped,
        "final_loss": float(result.loss_trace[-1]) if result.loss_trace.size else None,
    }


def guide_from_dict(content: Dict[str, object]) -> Guide:
    try:
        mean = np.asarray(content["mean"], dtype=float)
        tril = np.asarray(content["scale_tril"], dtype=float)
    except KeyError as exc:
        raise InputError(f"guide is missing {exc}") from exc
    factor = np.zeros((mean.shape[0], mean.shape[0]))
    factor[np.tril_indices(mean.shape[0])] = tril
    return Guide(mean=mean, scale_factor=factor)


def loss_trace_frame(result: VIResult) -> pd.DataFrame:
    return pd.DataFrame({"step": np.arange(1, result.loss_trace.size + 1), "loss": result.loss_trace})
