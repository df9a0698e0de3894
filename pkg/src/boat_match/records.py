"""
Record types shared across the boat-match stages.

All records are attrs classes. Plain records inherit ``Base`` for field introspection and dictionary construction;
records that carry numpy arrays compare by identity (``eq=False``) since element-wise equality has no single truth
value.
"""
import datetime
import math
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from attrs import asdict, define, field, fields, frozen, validators

from boat_match.errors import InputError
from boat_match.log import log

COVARIATES: Tuple[str, ...] = (
    "share_soc_start_high",
    "share_soc_end_low",
    "n_weekday_trips",
    "n_weekend_trips",
    "avg_trip_distance",
    "max_trip_distance",
    "avg_trip_speed",
    "max_trip_speed",
    "share_distance_hybrid",
    "share_trips_trailer",
    "avg_engine_starts",
    "temp_avg",
    "temp_min",
    "temp_max",
)
TARGET = "target"
CONTROL = 0
TREATMENT = 1
SCHEMA_VERSION = 1


def _finite(instance, attribute, value):
    if not np.all(np.isfinite(value)):
        raise ValueError(f"'{attribute.name}' must be finite: {value}")


def _float_array(value) -> np.ndarray:
    return np.asarray(value, dtype=float)


def _percent(instance, attribute, value):
    if not 0.0 <= value <= 100.0:
        raise ValueError(f"'{attribute.name}' must be within [0, 100]: {value}")


def _open_unit_interval(instance, attribute, value):
    if not 0.0 < value < 1.0:
        raise ValueError(f"'{attribute.name}' must be within (0, 1): {value}")


class Base:
    """
    Base record with helpers to list field names and build an instance from a wider mapping.
    """

    @classmethod
    def fields(cls) -> List[str]:
        """
        Returns:
            List[str]: the attrs field names of the class, in declaration order.
        """
        return [f.name for f in fields(cls)]

    @classmethod
    def from_values(cls, values: Dict[str, Any]):
        """
        Creates an instance from a dictionary, ignoring keys that are not fields of the class.

        Parameters:
            values (Dict[str, Any]): key-value pairs, keys matching the class fields.

        Returns:
            An instance initialised with the matching values.
        """
        return cls(**{k: v for k, v in values.items() if k in cls.fields()})

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------------------------------------------------


@frozen
class DriveCycleRecord(Base):
    """
    One key-on/key-off drive cycle of one unit. One record is one trip for aggregation purposes.

    Distances are kilometres, duration seconds, fuel grams, speeds km/h, state of charge percent, temperatures
    degrees Celsius. ``start_time`` is timezone-aware UTC.
    """

    unit_id: str
    cycle_id: str
    start_time: datetime.datetime
    distance: float = field(validator=validators.ge(0.0))
    duration: float = field(validator=validators.ge(0.0))
    fuel: float = field(validator=validators.ge(0.0))
    odometer: float = field(validator=validators.ge(0.0))
    soc_start: float = field(validator=_percent)
    soc_end: float = field(validator=_percent)
    avg_speed: float = field(validator=validators.ge(0.0))
    max_speed: float = field(validator=validators.ge(0.0))
    hybrid_distance: float = field(validator=validators.ge(0.0))
    trailer_attached: bool
    engine_starts: int = field(validator=validators.ge(0))
    ambient_temp_avg: float
    ambient_temp_min: float
    ambient_temp_max: float

    def __attrs_post_init__(self):
        if self.hybrid_distance > self.distance:
            raise ValueError(f"'hybrid_distance' {self.hybrid_distance} exceeds 'distance' {self.distance}")
        if not self.ambient_temp_min <= self.ambient_temp_avg <= self.ambient_temp_max:
            raise ValueError(
                "ambient temperatures must satisfy min <= avg <= max: "
                f"{self.ambient_temp_min}, {self.ambient_temp_avg}, {self.ambient_temp_max}"
            )


@frozen
class Reject(Base):
    unit_id: str
    cycle_id: str
    reason: str


@frozen
class UnitFeatureRow(Base):
    """
    One unit's aggregated covariates (order of ``COVARIATES``) and target in g/km. ``group`` is None until the
    assignment has been joined.
    """

    unit_id: str
    target: float
    covariates: Tuple[float, ...] = field(converter=tuple)
    group: Optional[int] = None

    def covariate(self, name: str) -> float:
        return self.covariates[COVARIATES.index(name)]


@define(eq=False)
class FeatureMatrix:
    """
    N units by I covariates plus target and group labels.

    ``scaling_params`` maps every covariate and ``target`` to its ``(min, max)`` over the pooled units; it is empty
    until the matrix has been scaled.
    """

    unit_ids: List[str] = field(converter=list)
    groups: np.ndarray = field(converter=lambda v: np.asarray(v, dtype=int))
    target: np.ndarray = field(converter=_float_array)
    X: np.ndarray = field(converter=_float_array)
    columns: Tuple[str, ...] = field(default=COVARIATES, converter=tuple)
    scaling_params: Dict[str, Tuple[float, float]] = field(factory=dict)
    scaled: bool = False

    def __attrs_post_init__(self):
        n = len(self.unit_ids)
        if self.X.ndim != 2 or self.X.shape != (n, len(self.columns)):
            raise ValueError(f"covariate matrix shape {self.X.shape} does not match {n} units x {len(self.columns)}")
        if self.target.shape != (n,) or self.groups.shape != (n,):
            raise ValueError("target and group vectors must have one entry per unit")

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @classmethod
    def from_rows(cls, rows: List[UnitFeatureRow], columns: Tuple[str, ...] = COVARIATES) -> "FeatureMatrix":
        return cls(
            unit_ids=[r.unit_id for r in rows],
            groups=[-1 if r.group is None else r.group for r in rows],
            target=[r.target for r in rows],
            X=np.array([r.covariates for r in rows], dtype=float).reshape(len(rows), len(columns)),
            columns=columns,
        )

    def rows(self) -> List[UnitFeatureRow]:
        return [
            UnitFeatureRow(
                unit_id=uid,
                target=float(self.target[i]),
                covariates=tuple(float(v) for v in self.X[i]),
                group=int(self.groups[i]) if self.groups[i] >= 0 else None,
            )
            for i, uid in enumerate(self.unit_ids)
        ]

    def subset(self, mask: np.ndarray) -> "FeatureMatrix":
        idx = np.flatnonzero(mask)
        return FeatureMatrix(
            unit_ids=[self.unit_ids[i] for i in idx],
            groups=self.groups[idx],
            target=self.target[idx],
            X=self.X[idx],
            columns=self.columns,
            scaling_params=dict(self.scaling_params),
            scaled=self.scaled,
        )

    def index_of(self) -> Dict[str, int]:
        return {uid: i for i, uid in enumerate(self.unit_ids)}


# ---------------------------------------------------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------------------------------------------------


@define(eq=False)
class Dataset:
    """
    Treatment-assignment data: scaled covariates ``X`` (N x I), treatment indicator ``y`` and the unit IDs.

    The constructor only checks shapes and that ``y`` is binary. ``check_groups`` enforces the presence of both groups
    and is called by the inference entry points.
    """

    X: np.ndarray = field(converter=_float_array)
    y: np.ndarray = field(converter=_float_array)
    unit_ids: List[str] = field(factory=list, converter=list)

    def __attrs_post_init__(self):
        if self.X.ndim == 1 and self.X.size == 0:
            self.X = self.X.reshape(0, 0)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X shape {self.X.shape} does not match y length {self.y.shape[0]}")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ValueError("y must be a 0/1 vector")
        if not self.unit_ids:
            self.unit_ids = [str(i) for i in range(self.y.shape[0])]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.y.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    @classmethod
    def from_features(cls, features: FeatureMatrix) -> "Dataset":
        if np.any(features.groups < 0):
            raise ValueError("feature matrix has units without a group assignment")
        return cls(X=features.X, y=features.groups, unit_ids=features.unit_ids)

    def check_groups(self):
        """
        Raises:
        InputError: if the treatment indicator does not contain both groups.
        """
        if self.n_treated == 0 or self.n_control == 0:
            raise InputError(
                f"treatment indicator must contain both groups (control={self.n_control}, treated={self.n_treated})"
            )
        if self.n_control < self.n_treated:
            log.warning(f"fewer control units ({self.n_control}) than treated units ({self.n_treated})")


@frozen
class Priors(Base):
    """Zero-mean Gaussian priors; both values are variances."""

    lambda_alpha: float = field(default=1.0, validator=validators.gt(0.0))
    lambda_beta: float = field(default=1.0, validator=validators.gt(0.0))


@define(eq=False)
class ParamVector:
    alpha: float = field(converter=float, validator=_finite)
    beta: np.ndarray = field(converter=_float_array, validator=_finite)

    @property
    def dim(self) -> int:
        return 1 + self.beta.shape[0]

    def as_array(self) -> np.ndarray:
        return np.concatenate(([self.alpha], self.beta))

    @classmethod
    def from_array(cls, theta) -> "ParamVector":
        theta = np.asarray(theta, dtype=float)
        return cls(alpha=theta[0], beta=theta[1:])

    def negated(self) -> "ParamVector":
        return ParamVector(alpha=-self.alpha, beta=-self.beta)


def param_names(n_covariates: int) -> List[str]:
    return ["alpha"] + [f"beta_{i}" for i in range(1, n_covariates + 1)]


# ---------------------------------------------------------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------------------------------------------------------


@frozen
class SamplerConfig(Base):
    """
    NUTS settings. Defaults are a single chain of 3000 kept draws after 200 warmup iterations.
    ``init`` is ``zeros`` or ``prior``; ``multinomial`` selects multinomial trajectory sampling (False: slice).
    """

    n_samples: int = field(default=3000, validator=validators.gt(0))
    n_warmup: int = field(default=200, validator=validators.ge(0))
    n_chains: int = field(default=1, validator=validators.gt(0))
    target_accept: float = field(default=0.8, validator=_open_unit_interval)
    max_tree_depth: int = field(default=10, validator=validators.ge(0))
    seed: int = field(default=0, validator=validators.ge(0))
    init: str = field(default="zeros", validator=validators.in_(("zeros", "prior")))
    adapt_mass: bool = False
    multinomial: bool = True
    max_energy_error: float = field(default=1000.0, validator=validators.gt(0.0))
    initial_step_size: Optional[float] = field(default=None)


@define(eq=False)
class PosteriorDraws:
    """
    Post-warmup draws, rows grouped contiguously by chain. Column 0 is alpha.
    ``stats`` holds one array per transition statistic (``accept_stat``, ``tree_depth``, ``n_leapfrog``,
    ``divergent``) aligned with the rows of ``draws``.
    """

    draws: np.ndarray = field(converter=_float_array)
    chain_ids: np.ndarray = field(converter=lambda v: np.asarray(v, dtype=int))
    divergence_count: int = 0
    mean_accept: float = float("nan")
    step_sizes: List[float] = field(factory=list)
    stats: Dict[str, np.ndarray] = field(factory=dict)
    unreliable: bool = False
    names: List[str] = field(factory=list)

    def __attrs_post_init__(self):
        if self.draws.ndim == 1:
            self.draws = self.draws.reshape(-1, 1)
        if self.chain_ids.shape[0] != self.draws.shape[0]:
            raise ValueError("chain_ids must label every draw")
        if not self.names:
            self.names = param_names(self.draws.shape[1] - 1)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def dim(self) -> int:
        return self.draws.shape[1]

    def chains(self) -> List[np.ndarray]:
        """Per-chain draw arrays in chain-index order."""
        return [self.draws[self.chain_ids == c] for c in np.unique(self.chain_ids)]

    @classmethod
    def from_array(cls, draws, n_chains: int = 1) -> "PosteriorDraws":
        """Wraps a plain (S, D) array whose rows are split evenly and contiguously across ``n_chains``."""
        draws = np.asarray(draws, dtype=float)
        if draws.ndim == 1:
            draws = draws.reshape(-1, 1)
        per_chain = draws.shape[0] // n_chains
        return cls(draws=draws, chain_ids=np.repeat(np.arange(n_chains), per_chain))


# ---------------------------------------------------------------------------------------------------------------------
# vi
# ---------------------------------------------------------------------------------------------------------------------


@frozen
class VIConfig(Base):
    n_steps: int = field(default=40000, validator=validators.ge(0))
    n_mc: int = field(default=8, validator=validators.gt(0))
    learning_rate: float = field(default=0.01, validator=validators.gt(0.0))
    seed: int = field(default=0, validator=validators.ge(0))
    mean_field: bool = False
    init_scale: float = field(default=0.1, validator=validators.gt(0.0))


@define(eq=False)
class Guide:
    """Multivariate normal with covariance ``scale_factor @ scale_factor.T``; the factor is lower triangular."""

    mean: np.ndarray = field(converter=_float_array)
    scale_factor: np.ndarray = field(converter=_float_array)

    def __attrs_post_init__(self):
        d = self.mean.shape[0]
        if self.scale_factor.shape != (d, d):
            raise ValueError(f"scale_factor must be {d}x{d}, got {self.scale_factor.shape}")
        if not np.allclose(self.scale_factor, np.tril(self.scale_factor)):
            raise ValueError("scale_factor must be lower triangular")
        if np.any(np.diag(self.scale_factor) <= 0):
            raise ValueError("scale_factor diagonal must be positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        return self.scale_factor @ self.scale_factor.T

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    @classmethod
    def initial(cls, dim: int, scale: float = 0.1) -> "Guide":
        return cls(mean=np.zeros(dim), scale_factor=scale * np.eye(dim))

    def entropy(self) -> float:
        d = self.dim
        return 0.5 * d * (1.0 + math.log(2.0 * math.pi)) + float(np.sum(np.log(np.diag(self.scale_factor))))


# ---------------------------------------------------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------------------------------------------------


@define(eq=False)
class DiagnosticsReport:
    names: List[str]
    rhat: np.ndarray
    ess: np.ndarray
    degenerate: List[str]
    summaries: Dict[str, Dict[str, float]]
    threshold: float = 1.1
    n_draws: int = 0
    n_chains: int = 1

    @property
    def converged(self) -> bool:
        """True only when every parameter is well defined and below the R-hat threshold."""
        if self.degenerate or len(self.rhat) == 0:
            return False
        return bool(np.all(self.rhat < self.threshold))


# ---------------------------------------------------------------------------------------------------------------------
# scoring / matching / analysis
# ---------------------------------------------------------------------------------------------------------------------


@define(eq=False)
class ScoreTable:
    unit_ids: List[str] = field(converter=list)
    groups: np.ndarray = field(converter=lambda v: np.asarray(v, dtype=int))
    point_score: np.ndarray = field(converter=_float_array)
    draw_scores: Optional[np.ndarray] = None

    @property
    def draw_mean_score(self) -> Optional[np.ndarray]:
        if self.draw_scores is None:
            return None
        return self.draw_scores.mean(axis=0)


@frozen
class MatchConfig(Base):
    """
    ``method`` is ``caliper`` or ``nn1``. ``order`` is ``descending_score``, ``input_order`` or ``random``; the seed
    is only consulted by ``random``.
    """

    method: str = field(default="caliper", validator=validators.in_(("caliper", "nn1")))
    width: float = field(default=0.05, validator=validators.gt(0.0))
    order: str = field(
        default="descending_score", validator=validators.in_(("descending_score", "input_order", "random"))
    )
    seed: int = field(default=0, validator=validators.ge(0))


@frozen
class MatchedPair(Base):
    treated_id: str
    control_id: str
    delta_p: float


@define
class MatchedPairs(Base):
    pairs: List[MatchedPair] = field(factory=list)
    unmatched_treated: List[str] = field(factory=list)
    method: str = "caliper"

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def treated_ids(self) -> List[str]:
        return [p.treated_id for p in self.pairs]

    @property
    def control_ids(self) -> List[str]:
        return [p.control_id for p in self.pairs]


@define(eq=False)
class BalanceReport:
    columns: List[str]
    asmd_before: np.ndarray
    asmd_after: np.ndarray
    var_control_before: np.ndarray
    var_control_after: np.ndarray
    variance_reduction: np.ndarray
    avg_variance_reduction: float
    mean_before: Dict[str, np.ndarray]
    mean_after: Dict[str, np.ndarray]
    sd_before: Dict[str, np.ndarray]
    sd_after: Dict[str, np.ndarray]
    variance_ratio_before: np.ndarray
    variance_ratio_after: np.ndarray
    corr_target: np.ndarray
    corr_treatment: np.ndarray
    degenerate: List[str] = field(factory=list)

    @property
    def avg_asmd_before(self) -> float:
        return _nanmean(self.asmd_before)

    @property
    def avg_asmd_after(self) -> float:
        return _nanmean(self.asmd_after)


@frozen
class EffectReport(Base):
    ate_naive: float
    ate_matched: Optional[float]
    target_mean_control_before: float
    target_mean_treated_before: float
    target_mean_control_after: Optional[float]
    target_mean_treated_after: Optional[float]
    n_pairs: int


def _nanmean(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0 or np.all(np.isnan(values)):
        return float("nan")
    return float(np.nanmean(values))


# ---------------------------------------------------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------------------------------------------------


def _default_assignment_beta(n: int) -> Tuple[float, ...]:
    return tuple(2.0 if i < 4 else 0.0 for i in range(n))


def _default_outcome_beta(n: int) -> Tuple[float, ...]:
    return tuple(1.0 if i < 4 else (0.25 if i < 6 else 0.0) for i in range(n))


@frozen
class SynthConfig(Base):
    """
    Confounded study generator settings. ``true_beta`` drives assignment, ``outcome_beta`` the target; covariates
    that carry weight in both are the confounders. ``copula_rho`` > 0 correlates the covariates through a Gaussian
    copula with equal pairwise correlation.
    """

    n_control: int = field(default=1100, validator=validators.ge(0))
    n_treated: int = field(default=38, validator=validators.ge(0))
    n_covariates: int = field(default=14, validator=validators.gt(0))
    true_alpha: float = -6.0
    true_beta: Optional[Tuple[float, ...]] = field(default=None)
    outcome_beta: Optional[Tuple[float, ...]] = field(default=None)
    tau: float = -0.05
    noise_sd: float = field(default=0.1, validator=validators.ge(0.0))
    seed: int = field(default=0, validator=validators.ge(0))
    copula_rho: float = field(default=0.0, validator=[validators.ge(0.0), validators.lt(1.0)])
    max_rounds: int = field(default=10**6, validator=validators.gt(0))

    def __attrs_post_init__(self):
        if self.n_control + self.n_treated < 2:
            raise ValueError("n_control + n_treated must be at least 2")
        for name in ("true_beta", "outcome_beta"):
            value = getattr(self, name)
            if value is not None and len(value) != self.n_covariates:
                raise ValueError(f"'{name}' must have {self.n_covariates} entries, got {len(value)}")

    @property
    def assignment_beta(self) -> np.ndarray:
        beta = self.true_beta if self.true_beta is not None else _default_assignment_beta(self.n_covariates)
        return np.asarray(beta, dtype=float)

    @property
    def target_beta(self) -> np.ndarray:
        beta = self.outcome_beta if self.outcome_beta is not None else _default_outcome_beta(self.n_covariates)
        return np.asarray(beta, dtype=float)


@frozen
class GroundTruth(Base):
    true_alpha: float
    true_beta: Tuple[float, ...]
    outcome_beta: Tuple[float, ...]
    tau_raw: float
    tau_scaled: float
    target_min: float
    target_max: float
    seed: int
    rounds: int
