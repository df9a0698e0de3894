"""
Convergence and mixing diagnostics for posterior draws.

- ``split_rhat``: classic potential scale reduction on split chains, with sample (n-1) variances.
- ``effective_sample_size``: FFT autocovariance, combined across chains, truncated by Geyer's initial positive
  sequence and capped at the total draw count.
- ``summarize``: column mean, sd and 5%/95% quantiles (linear interpolation).

A parameter whose within-chain variance is zero is reported as degenerate; a degenerate parameter never counts as
converged.
"""
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
from scipy.special import ndtri
from scipy.stats import rankdata

from boat_match.log import log
from boat_match.records import DiagnosticsReport, PosteriorDraws

RHAT_THRESHOLD = 1.1
MIN_RHAT_LENGTH = 4
MIN_ESS_LENGTH = 8


def _as_chains(draws) -> np.ndarray:
    """(n_chains, n_draws_per_chain, dim) view of ``PosteriorDraws`` or a plain (S, D) / (S,) array."""
    if isinstance(draws, PosteriorDraws):
        chains = draws.chains()
        length = min(c.shape[0] for c in chains)
        return np.stack([c[:length] for c in chains])
    values = np.asarray(draws, dtype=float)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    if values.ndim == 2:
        values = values[np.newaxis]
    return values


def rank_normalize(chains: np.ndarray) -> np.ndarray:
    """Replaces each parameter's pooled draws by normal scores of their ranks."""
    n_chains, n_draws, dim = chains.shape
    pooled = chains.reshape(n_chains * n_draws, dim)
    ranks = np.apply_along_axis(rankdata, 0, pooled)
    scores = ndtri((ranks - 0.375) / (pooled.shape[0] + 0.25))
    return scores.reshape(n_chains, n_draws, dim)


def _split(chains: np.ndarray) -> np.ndarray:
    n = chains.shape[1]
    if n % 2:
        chains = chains[:, 1:]
        n -= 1
    half = n // 2
    return np.concatenate([chains[:, :half], chains[:, half:]], axis=0)


def _rhat_with_flags(chains: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if chains.shape[1] < MIN_RHAT_LENGTH:
        raise ValueError(f"split R-hat needs chains of at least {MIN_RHAT_LENGTH} draws, got {chains.shape[1]}")
    halves = _split(chains)
    n = halves.shape[1]
    within = halves.var(axis=1, ddof=1).mean(axis=0)
    between = n * halves.mean(axis=1).var(axis=0, ddof=1)
    var_plus = (n - 1) / n * within + between / n
    degenerate = within <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.where(degenerate, np.nan, np.sqrt(var_plus / np.where(degenerate, 1.0, within)))
    return rhat, degenerate


def split_rhat(draws, rank_normalized: bool = False) -> np.ndarray:
    """
    Split-chain R-hat per parameter.

    Parameters:
    draws: ``PosteriorDraws`` or an (S, D) array treated as one chain.
    rank_normalized (bool): compute on rank-normalised draws.

    Returns:
    np.ndarray: one value per parameter; NaN where the parameter is degenerate.
    """
    chains = _as_chains(draws)
    if rank_normalized:
        chains = rank_normalize(chains)
    return _rhat_with_flags(chains)[0]


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row of x (n_chains, n) via zero-padded FFT."""
    n = x.shape[-1]
    centered = x - x.mean(axis=-1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    spectrum = np.fft.rfft(centered, n=size, axis=-1)
    return np.fft.irfft(spectrum * np.conjugate(spectrum), n=size, axis=-1)[..., :n] / n


def _ess_1d(chains: np.ndarray) -> float:
    """ESS for one parameter given (n_chains, n) draws; 0 for a constant parameter."""
    m, n = chains.shape
    acov = _autocovariance(chains)
    chain_var = acov[:, 0] * n / (n - 1)
    within = chain_var.mean()
    if within <= 0:
        return 0.0
    var_plus = within * (n - 1) / n
    if m > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)
    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0

    # initial positive sequence of paired sums, made monotone
    tau_sum = 0.0
    previous = np.inf
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        pair = min(pair, previous)
        tau_sum += pair
        previous = pair
    tau = max(-1.0 + 2.0 * tau_sum, 1.0 / np.log10(m * n + 10))
    return float(min(m * n / tau, m * n))


def effective_sample_size(draws, rank_normalized: bool = False) -> np.ndarray:
    """
    Effective sample size per parameter.

    Raises:
    ValueError: when chains are shorter than 8 draws.
    """
    chains = _as_chains(draws)
    if chains.shape[1] < MIN_ESS_LENGTH:
        raise ValueError(f"ESS needs chains of at least {MIN_ESS_LENGTH} draws, got {chains.shape[1]}")
    if rank_normalized:
        chains = rank_normalize(chains)
    return np.array([_ess_1d(chains[:, :, d]) for d in range(chains.shape[2])])


def summarize(draws, names: List[str] = None) -> Dict[str, Dict[str, float]]:
    """
    Column-wise mean, sd, q05 and q95. A single row has sd 0.
    """
    values = draws.draws if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    if values.shape[0] == 0:
        raise ValueError("cannot summarise an empty set of draws")
    if names is None:
        names = draws.names if isinstance(draws, PosteriorDraws) else [f"x{d}" for d in range(values.shape[1])]
    ddof = 1 if values.shape[0] > 1 else 0
    mean = values.mean(axis=0)
    sd = values.std(axis=0, ddof=ddof)
    q05, q95 = np.quantile(values, [0.05, 0.95], axis=0)
    return {
        name: {"mean": float(mean[d]), "sd": float(sd[d]), "q05": float(q05[d]), "q95": float(q95[d])}
        for d, name in enumerate(names)
    }


def diagnose(
    draws: PosteriorDraws, threshold: float = RHAT_THRESHOLD, rank_normalized: bool = False
) -> DiagnosticsReport:
    """
    Builds the full report. Chains too short for R-hat make every parameter degenerate rather than raising, so a
    report can always be written.
    """
    chains = _as_chains(draws)
    n_chains, length, dim = chains.shape
    names = draws.names
    if rank_normalized:
        chains = rank_normalize(chains)
    if length < MIN_RHAT_LENGTH:
        log.warning(f"chains of {length} draws are too short for split R-hat; all parameters marked degenerate")
        rhat = np.full(dim, np.nan)
        flags = np.ones(dim, dtype=bool)
    else:
        rhat, flags = _rhat_with_flags(chains)
    if length >= MIN_ESS_LENGTH:
        ess = np.array([_ess_1d(chains[:, :, d]) for d in range(dim)])
    else:
        ess = np.full(dim, np.nan)
    degenerate = [names[d] for d in range(dim) if flags[d]]
    report = DiagnosticsReport(
        names=list(names),
        rhat=rhat,
        ess=ess,
        degenerate=degenerate,
        summaries=summarize(draws),
        threshold=threshold,
        n_draws=draws.n_draws,
        n_chains=n_chains,
    )
    if degenerate:
        log.warning(f"degenerate parameters (zero within-chain variance): {', '.join(degenerate)}")
    worst = np.nanmax(rhat) if np.any(np.isfinite(rhat)) else float("nan")
    log.info(f"diagnostics: max split R-hat {worst:.4f}, converged={report.converged}")
    return report


def report_as_dict(report: DiagnosticsReport) -> Dict[str, object]:
    return {
        "converged": report.converged,
        "threshold": report.threshold,
        "n_draws": report.n_draws,
        "n_chains": report.n_chains,
        "degenerate": report.degenerate,
        "parameters": {
            name: {"rhat": report.rhat[d], "ess": report.ess[d], **report.summaries[name]}
            for d, name in enumerate(report.names)
        },
    }


def trace_frame(draws: PosteriorDraws, rank_normalized: bool = False) -> pd.DataFrame:
    """Per-draw trace (``chain,draw_index`` plus one column per parameter) for external plotting."""
    chains = _as_chains(draws)
    if rank_normalized:
        chains = rank_normalize(chains)
    n_chains, length, dim = chains.shape
    frame = pd.DataFrame(chains.reshape(n_chains * length, dim), columns=draws.names)
    frame.insert(0, "draw_index", np.tile(np.arange(length), n_chains))
    frame.insert(0, "chain", np.repeat(np.unique(draws.chain_ids), length))
    return frame
