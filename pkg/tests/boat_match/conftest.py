from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit

from boat_match.records import Dataset, FeatureMatrix, Priors

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def trips_path() -> Path:
    return DATA_DIR / "trips.csv"


@pytest.fixture
def assignment_path() -> Path:
    return DATA_DIR / "assignment.csv"


@pytest.fixture
def priors() -> Priors:
    return Priors()


@pytest.fixture
def logistic_data() -> Dataset:
    """200 units, 2 covariates in [0, 1], drawn from alpha=-0.5, beta=(1.5, -1.0)."""
    rng = np.random.default_rng(42)
    X = rng.random((200, 2))
    y = (rng.random(200) < expit(-0.5 + X @ np.array([1.5, -1.0]))).astype(int)
    return Dataset(X=X, y=y)


def make_features(groups, X, target=None, unit_ids=None) -> FeatureMatrix:
    """A scaled feature matrix for hand-built matching and balance cases."""
    groups = np.asarray(groups, dtype=int)
    X = np.asarray(X, dtype=float).reshape(len(groups), -1)
    return FeatureMatrix(
        unit_ids=unit_ids or [f"u{i}" for i in range(len(groups))],
        groups=groups,
        target=np.zeros(len(groups)) if target is None else target,
        X=X,
        columns=tuple(f"x{j}" for j in range(1, X.shape[1] + 1)),
        scaled=True,
    )


@pytest.fixture
def features_factory():
    return make_features
