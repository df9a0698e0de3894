"""
No-U-Turn sampler for the assignment-model posterior.

Hamiltonian with a diagonal (by default identity) mass matrix M:

    H(q, p) = -log_density(q) + 0.5 * p^T M^{-1} p

One transition draws a momentum, then doubles a trajectory of leapfrog steps in a random direction until the
trajectory starts to turn back on itself (dq . M^{-1}p < 0 at either end), the energy error exceeds
``max_energy_error`` (a divergence) or ``max_tree_depth`` doublings have been made. The next state is drawn from the
trajectory either multinomially, with weights exp(-H), or from the states inside a slice variable (the original
formulation). Both use biased progressive sampling between the old trajectory and each new subtree.

Warmup tunes the step size by dual averaging towards ``target_accept`` and, optionally, a diagonal mass matrix from
the positions visited in the middle of warmup. Warmup draws are discarded.
"""
import math
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from attrs import define

from boat_match.errors import InputError, SamplingError
from boat_match.config import stage_sequence
from boat_match.log import log
from boat_match.model import LogisticPosterior
from boat_match.records import Dataset, PosteriorDraws, Priors, SamplerConfig, param_names

ValueAndGrad = Callable[[np.ndarray], Tuple[float, np.ndarray]]
SHORT_WARMUP = 500
UNRELIABLE_DIVERGENCE_SHARE = 0.10


def leapfrog_step(
    position: np.ndarray,
    momentum: np.ndarray,
    grad: np.ndarray,
    step_size: float,
    value_and_grad: ValueAndGrad,
    inv_mass: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """
    Leapfrog step reusing the gradient already known at ``position``. Returns the new position and momentum with the
    log density and gradient at the new position.
    """
    momentum_half = momentum + 0.5 * step_size * grad
    position_new = position + step_size * inv_mass * momentum_half
    value, grad_new = value_and_grad(position_new)
    grad_new = np.asarray(grad_new, dtype=float)
    momentum_new = momentum_half + 0.5 * step_size * grad_new
    return position_new, momentum_new, float(value), grad_new


def leapfrog(
    position: np.ndarray,
    momentum: np.ndarray,
    step_size: float,
    grad_fn: Callable[[np.ndarray], np.ndarray],
    inv_mass: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    One leapfrog step: half momentum kick, full position drift, half momentum kick.

    Parameters:
    position, momentum: current phase-space point.
    step_size: integrator step; negative values integrate backwards in time.
    grad_fn: gradient of the log density.
    inv_mass: diagonal of the inverse mass matrix (identity when None).

    Returns:
    (position', momentum'). A non-finite gradient yields non-finite output, which the tree builder flags divergent.
    """
    position = np.asarray(position, dtype=float)
    momentum = np.asarray(momentum, dtype=float)
    inv_mass = np.ones_like(position) if inv_mass is None else inv_mass
    grad = np.asarray(grad_fn(position), dtype=float)
    position_new, momentum_new, _, _ = leapfrog_step(
        position, momentum, grad, step_size, lambda q: (math.nan, grad_fn(q)), inv_mass
    )
    return position_new, momentum_new


@define
class Point:
    """A phase-space point with its cached log density and gradient."""

    q: np.ndarray
    p: np.ndarray
    log_density: float
    grad: np.ndarray

    def energy(self, inv_mass: np.ndarray) -> float:
        return -self.log_density + 0.5 * float(np.sum(self.p * self.p * inv_mass))


@define
class _Tree:
    left: Point
    right: Point
    proposal: Point
    log_weight: float
    turning: bool
    divergent: bool
    accept_sum: float
    n_steps: int


@define
class TransitionStats:
    accept_stat: float
    tree_depth: int
    n_leapfrog: int
    divergent: bool
    energy: float


def _is_turning(left: Point, right: Point, inv_mass: np.ndarray) -> bool:
    dq = right.q - left.q
    return bool(np.dot(dq, inv_mass * left.p) < 0.0 or np.dot(dq, inv_mass * right.p) < 0.0)


class NUTSKernel:
    """
    The transition kernel. Holds the target and integrator settings; the step size and rng are passed per call so
    that warmup can change the former and chains can own the latter.
    """

    def __init__(
        self,
        value_and_grad: ValueAndGrad,
        max_tree_depth: int = 10,
        inv_mass: Optional[np.ndarray] = None,
        max_energy_error: float = 1000.0,
        multinomial: bool = True,
    ):
        self.value_and_grad = value_and_grad
        self.max_tree_depth = max_tree_depth
        self.inv_mass = inv_mass
        self.max_energy_error = max_energy_error
        self.multinomial = multinomial

    def point(self, q: np.ndarray, p: Optional[np.ndarray] = None) -> Point:
        q = np.asarray(q, dtype=float)
        value, grad = self.value_and_grad(q)
        return Point(q=q, p=np.zeros_like(q) if p is None else p, log_density=float(value), grad=np.asarray(grad))

    def _inv_mass(self, dim: int) -> np.ndarray:
        return np.ones(dim) if self.inv_mass is None else self.inv_mass

    def _step(self, point: Point, step_size: float, inv_mass: np.ndarray) -> Point:
        q_new, p_new, value, grad = leapfrog_step(
            point.q, point.p, point.grad, step_size, self.value_and_grad, inv_mass
        )
        return Point(q=q_new, p=p_new, log_density=value, grad=grad)

    def _leaf(self, point, direction, step_size, H0, log_u, inv_mass) -> _Tree:
        new = self._step(point, direction * step_size, inv_mass)
        H1 = new.energy(inv_mass)
        if not math.isfinite(H1):
            return _Tree(new, new, point, -math.inf, False, True, 0.0, 1)
        delta = H1 - H0
        divergent = delta > self.max_energy_error
        if self.multinomial:
            log_weight = -delta
        else:
            log_weight = 0.0 if log_u <= -H1 else -math.inf
        accept = 1.0 if delta <= 0 else math.exp(-delta)
        return _Tree(new, new, new, log_weight, False, divergent, accept, 1)

    def _build(self, point, direction, depth, step_size, H0, log_u, inv_mass, rng) -> _Tree:
        if depth == 0:
            return self._leaf(point, direction, step_size, H0, log_u, inv_mass)
        first = self._build(point, direction, depth - 1, step_size, H0, log_u, inv_mass, rng)
        if first.divergent or first.turning:
            return first
        edge = first.left if direction < 0 else first.right
        second = self._build(edge, direction, depth - 1, step_size, H0, log_u, inv_mass, rng)
        if direction < 0:
            left, right = second.left, first.right
        else:
            left, right = first.left, second.right
        log_weight = np.logaddexp(first.log_weight, second.log_weight)
        proposal = first.proposal
        if math.isfinite(second.log_weight) and second.log_weight - log_weight > math.log(rng.random()):
            proposal = second.proposal
        return _Tree(
            left=left,
            right=right,
            proposal=proposal,
            log_weight=float(log_weight),
            turning=second.turning or _is_turning(left, right, inv_mass),
            divergent=second.divergent,
            accept_sum=first.accept_sum + second.accept_sum,
            n_steps=first.n_steps + second.n_steps,
        )

    def transition(self, point: Point, step_size: float, rng: np.random.Generator) -> Tuple[Point, TransitionStats]:
        """
        One NUTS transition from ``point``. A trajectory that diverges on its very first leapfrog step leaves the
        state unchanged and is recorded as divergent.
        """
        inv_mass = self._inv_mass(point.q.shape[0])
        momentum = rng.standard_normal(point.q.shape[0]) / np.sqrt(inv_mass)
        start = Point(q=point.q, p=momentum, log_density=point.log_density, grad=point.grad)
        H0 = start.energy(inv_mass)
        log_u = -H0 + math.log(rng.random()) if not self.multinomial else 0.0

        left = right = proposal = start
        log_weight = 0.0
        accept_sum = 0.0
        n_steps = 0
        divergent = False
        depth = 0
        while depth < max(1, self.max_tree_depth):
            direction = 1 if rng.random() < 0.5 else -1
            edge = left if direction < 0 else right
            subtree = self._build(edge, direction, depth, step_size, H0, log_u, inv_mass, rng)
            depth += 1
            accept_sum += subtree.accept_sum
            n_steps += subtree.n_steps
            if direction < 0:
                left = subtree.left
            else:
                right = subtree.right
            if subtree.divergent:
                divergent = True
                break
            if subtree.turning:
                break
            if math.isfinite(subtree.log_weight) and subtree.log_weight - log_weight > math.log(rng.random()):
                proposal = subtree.proposal
            log_weight = float(np.logaddexp(log_weight, subtree.log_weight))
            if _is_turning(left, right, inv_mass):
                break

        new = Point(q=proposal.q, p=proposal.p, log_density=proposal.log_density, grad=proposal.grad)
        stats = TransitionStats(
            accept_stat=accept_sum / max(1, n_steps),
            tree_depth=depth,
            n_leapfrog=n_steps,
            divergent=divergent,
            energy=new.energy(inv_mass),
        )
        return new, stats


def nuts_step(
    state: np.ndarray,
    step_size: float,
    log_post_fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    rng: np.random.Generator,
    max_tree_depth: int = 10,
    max_energy_error: float = 1000.0,
    multinomial: bool = True,
) -> Tuple[np.ndarray, TransitionStats]:
    """
    A single NUTS transition on separate log-density and gradient callables.

    Returns:
    (new position, transition statistics).
    """
    kernel = NUTSKernel(
        lambda q: (log_post_fn(q), grad_fn(q)),
        max_tree_depth=max_tree_depth,
        max_energy_error=max_energy_error,
        multinomial=multinomial,
    )
    point = kernel.point(np.asarray(state, dtype=float))
    if not math.isfinite(point.log_density):
        raise SamplingError(f"log density is not finite at the initial state {state}")
    new, stats = kernel.transition(point, step_size, rng)
    return new.q, stats


class StepSizeAdapter:
    """
    Dual averaging of the log step size towards a target mean acceptance statistic.

    The prox-center is the log of the initial step size, so an acceptance statistic that always equals the target
    leaves the step size where it started.
    """

    def __init__(
        self,
        initial_step_size: float,
        target_accept: float = 0.8,
        t0: float = 10.0,
        kappa: float = 0.75,
        gamma: float = 0.05,
    ):
        if initial_step_size <= 0:
            raise ValueError(f"initial step size must be positive, got {initial_step_size}")
        self.target_accept = target_accept
        self.t0 = t0
        self.kappa = kappa
        self.gamma = gamma
        self.restart(initial_step_size)

    def restart(self, step_size: float):
        self.prox_center = math.log(step_size)
        self._t = 0
        self._g_avg = 0.0
        self._x_t = self.prox_center
        self._x_avg = 0.0

    @property
    def step_size(self) -> float:
        return math.exp(self._x_t)

    def update(self, accept_stat: float) -> float:
        self._t += 1
        g = self.target_accept - accept_stat
        self._g_avg = (1.0 - 1.0 / (self._t + self.t0)) * self._g_avg + g / (self._t + self.t0)
        self._x_t = self.prox_center - math.sqrt(self._t) / self.gamma * self._g_avg
        weight = self._t ** (-self.kappa)
        self._x_avg = (1.0 - weight) * self._x_avg + weight * self._x_t
        return self.step_size

    def final(self) -> float:
        if self._t == 0:
            return math.exp(self.prox_center)
        return math.exp(self._x_avg)


def adapt_step_size(
    warmup_stats: List[float],
    initial_step_size: float,
    target_accept: float = 0.8,
) -> Tuple[List[float], float]:
    """
    Replays dual averaging over a sequence of warmup acceptance statistics.

    Returns:
    (schedule, final): the step size after each update, and the averaged step size frozen for sampling.
    """
    adapter = StepSizeAdapter(initial_step_size, target_accept=target_accept)
    schedule = [adapter.update(a) for a in warmup_stats]
    return schedule, adapter.final()


def find_reasonable_step_size(
    kernel: NUTSKernel,
    point: Point,
    rng: np.random.Generator,
    initial: float = 1.0,
    min_step: float = 1e-6,
    max_step: float = 1e2,
) -> float:
    """
    Doubles or halves the step size until the one-step acceptance probability crosses 0.5.
    """
    inv_mass = kernel._inv_mass(point.q.shape[0])
    momentum = rng.standard_normal(point.q.shape[0]) / np.sqrt(inv_mass)
    start = Point(q=point.q, p=momentum, log_density=point.log_density, grad=point.grad)
    H0 = start.energy(inv_mass)

    def _log_accept(eps: float) -> float:
        H1 = kernel._step(start, eps, inv_mass).energy(inv_mass)
        return H0 - H1 if math.isfinite(H1) else -math.inf

    step_size = initial
    direction = 1.0 if _log_accept(step_size) > math.log(0.5) else -1.0
    while min_step < step_size < max_step:
        step_size *= 2.0**direction
        log_accept = _log_accept(step_size)
        if (direction > 0 and log_accept < math.log(0.5)) or (direction < 0 and log_accept > math.log(0.5)):
            break
    return float(min(max(step_size, min_step), max_step))


def _mass_window(n_warmup: int) -> Optional[Tuple[int, int]]:
    """Warmup iterations [start, end) whose positions estimate the diagonal mass matrix."""
    if n_warmup < 20:
        return None
    start = max(1, int(0.15 * n_warmup))
    end = n_warmup - max(1, int(0.10 * n_warmup))
    return (start, end) if end - start >= 10 else None


def run_chain(
    value_and_grad: ValueAndGrad,
    initial_position: np.ndarray,
    config: SamplerConfig,
    rng: np.random.Generator,
    chain: int = 0,
) -> Tuple[np.ndarray, Dict[str, np.ndarray], float]:
    """
    Runs warmup then ``config.n_samples`` kept transitions for one chain.

    Returns:
    (draws, per-draw stats, frozen step size).
    """
    kernel = NUTSKernel(
        value_and_grad,
        max_tree_depth=config.max_tree_depth,
        max_energy_error=config.max_energy_error,
        multinomial=config.multinomial,
    )
    point = kernel.point(initial_position)
    if not math.isfinite(point.log_density):
        raise SamplingError(f"chain {chain}: log density is not finite at the initial position")
    step_size = config.initial_step_size or find_reasonable_step_size(kernel, point, rng)
    adapter = StepSizeAdapter(step_size, target_accept=config.target_accept)
    window = _mass_window(config.n_warmup) if config.adapt_mass else None
    window_positions = []

    for i in range(config.n_warmup):
        point, stats = kernel.transition(point, adapter.step_size, rng)
        adapter.update(stats.accept_stat)
        if window is not None and window[0] <= i < window[1]:
            window_positions.append(point.q)
            if i == window[1] - 1:
                n = len(window_positions)
                variance = np.var(np.array(window_positions), axis=0, ddof=1)
                kernel.inv_mass = (n / (n + 5.0)) * variance + 1e-3 * (5.0 / (n + 5.0))
                adapter.restart(find_reasonable_step_size(kernel, point, rng, initial=adapter.step_size))
                log.debug(f"chain {chain}: diagonal mass updated at warmup iteration {i + 1}")
    step_size = adapter.final() if config.n_warmup > 0 else step_size
    log.debug(f"chain {chain}: step size frozen at {step_size:.5g}")

    draws = np.empty((config.n_samples, point.q.shape[0]))
    stats_out = {
        "accept_stat": np.empty(config.n_samples),
        "tree_depth": np.empty(config.n_samples, dtype=int),
        "n_leapfrog": np.empty(config.n_samples, dtype=int),
        "divergent": np.empty(config.n_samples, dtype=bool),
    }
    for i in range(config.n_samples):
        point, stats = kernel.transition(point, step_size, rng)
        draws[i] = point.q
        stats_out["accept_stat"][i] = stats.accept_stat
        stats_out["tree_depth"][i] = stats.tree_depth
        stats_out["n_leapfrog"][i] = stats.n_leapfrog
        stats_out["divergent"][i] = stats.divergent
    return draws, stats_out, step_size


def sample(
    value_and_grad: ValueAndGrad,
    dim: int,
    config: SamplerConfig,
    init_fn: Optional[Callable[[np.random.Generator], np.ndarray]] = None,
    names: Optional[List[str]] = None,
) -> PosteriorDraws:
    """
    Samples any differentiable log density on R^dim.

    Chain ``c`` draws from its own generator seeded with ``SeedSequence(config.seed, spawn_key=(1, c))``; chains are
    merged in index order so the result does not depend on how they are scheduled.
    """
    if config.n_warmup < SHORT_WARMUP:
        log.warning(f"{config.n_warmup} warmup iterations is short for step size adaptation (< {SHORT_WARMUP})")
    seeds = [stage_sequence(config.seed, "fit", c) for c in range(config.n_chains)]
    all_draws, chain_ids, step_sizes = [], [], []
    all_stats: Dict[str, List[np.ndarray]] = {}
    for chain, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        if config.init == "prior" and init_fn is not None:
            initial = init_fn(rng)
        else:
            initial = np.zeros(dim)
        draws, stats, step_size = run_chain(value_and_grad, initial, config, rng, chain=chain)
        all_draws.append(draws)
        chain_ids.append(np.full(draws.shape[0], chain))
        step_sizes.append(step_size)
        for key, values in stats.items():
            all_stats.setdefault(key, []).append(values)

    stats = {key: np.concatenate(values) for key, values in all_stats.items()}
    divergences = int(stats["divergent"].sum())
    total = config.n_samples * config.n_chains
    unreliable = divergences > UNRELIABLE_DIVERGENCE_SHARE * total
    if divergences:
        log.warning(f"{divergences} of {total} post-warmup transitions diverged")
    if unreliable:
        log.warning("more than 10% of transitions diverged; posterior draws are unreliable")
    return PosteriorDraws(
        draws=np.vstack(all_draws),
        chain_ids=np.concatenate(chain_ids),
        divergence_count=divergences,
        mean_accept=float(stats["accept_stat"].mean()),
        step_sizes=step_sizes,
        stats=stats,
        unreliable=unreliable,
        names=names or [],
    )


def sample_posterior(data: Dataset, priors: Priors, config: SamplerConfig) -> PosteriorDraws:
    """
    Draws ``config.n_samples`` post-warmup samples per chain from the assignment-model posterior.
    """
    data.check_groups()
    posterior = LogisticPosterior(data, priors)
    log.info(
        f"NUTS: {config.n_chains} chain(s), {config.n_warmup} warmup + {config.n_samples} draws, "
        f"{data.n} units x {data.n_covariates} covariates"
    )
    draws = sample(
        posterior.value_and_grad,
        posterior.dim,
        config,
        init_fn=posterior.prior_draw,
        names=param_names(data.n_covariates),
    )
    log.info(f"NUTS done: mean accept {draws.mean_accept:.3f}, {draws.divergence_count} divergences")
    return draws


def draws_frame(draws: PosteriorDraws) -> pd.DataFrame:
    """Long table ``chain,draw_index,alpha,beta_1..beta_I``."""
    frame = pd.DataFrame(draws.draws, columns=draws.names)
    draw_index = np.concatenate([np.arange(np.sum(draws.chain_ids == c)) for c in np.unique(draws.chain_ids)])
    frame.insert(0, "draw_index", draw_index)
    frame.insert(0, "chain", draws.chain_ids)
    return frame


def draws_from_frame(frame: pd.DataFrame) -> PosteriorDraws:
    if "chain" not in frame.columns or "alpha" not in frame.columns:
        raise InputError("draws table must have chain and alpha columns")
    frame = frame.sort_values(["chain", "draw_index"], kind="stable") if "draw_index" in frame.columns else frame
    names = [c for c in frame.columns if c not in ("chain", "draw_index")]
    return PosteriorDraws(draws=frame[names].to_numpy(dtype=float), chain_ids=frame["chain"].to_numpy(), names=names)


def sampler_stats(draws: PosteriorDraws) -> Dict[str, object]:
    stats = {
        "divergences": draws.divergence_count,
        "mean_accept": draws.mean_accept,
        "step_size": draws.step_sizes,
        "unreliable": draws.unreliable,
        "n_draws": draws.n_draws,
    }
    if "tree_depth" in draws.stats:
        stats["mean_tree_depth"] = float(np.mean(draws.stats["tree_depth"]))
        stats["mean_leapfrog"] = float(np.mean(draws.stats["n_leapfrog"]))
    return stats
