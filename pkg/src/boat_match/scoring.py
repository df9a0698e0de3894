"""
Propensity scores from posterior draws.

Matching uses one score per unit: by default the propensity at the posterior-mean parameters (``point``), optionally
the mean of the per-draw propensities (``draw_mean``). The two differ in general since the sigmoid is not linear.
"""
from typing import Dict, Optional, Union

import numpy as np
import pandas as pd

from boat_match.config import stage_rng
from boat_match.errors import InputError
from boat_match.model import propensity
from boat_match.records import CONTROL, TREATMENT, FeatureMatrix, MatchedPairs, ParamVector, PosteriorDraws, ScoreTable

SCORE_SOURCES = ("point", "draw_mean")


def _draw_matrix(draws: Union[PosteriorDraws, np.ndarray]) -> np.ndarray:
    values = draws.draws if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    return values.reshape(1, -1) if values.ndim == 1 else values


def point_estimate(draws: Union[PosteriorDraws, np.ndarray]) -> ParamVector:
    """Posterior means of alpha and beta."""
    values = _draw_matrix(draws)
    if values.shape[0] == 0:
        raise ValueError("cannot take the mean of zero draws")
    return ParamVector.from_array(values.mean(axis=0))


def _check_features(params: ParamVector, features: FeatureMatrix):
    if not features.scaled:
        raise InputError("features must be min-max scaled before scoring; the model is fit on scaled covariates")
    if features.X.shape[1] != params.beta.shape[0]:
        raise InputError(f"features have {features.X.shape[1]} covariates but the model has {params.beta.shape[0]}")


def score_all(params: ParamVector, features: FeatureMatrix) -> ScoreTable:
    """
    Scores every unit with ``params``.

    Raises:
    InputError: if the features are unscaled or the dimensions disagree.
    """
    _check_features(params, features)
    return ScoreTable(unit_ids=features.unit_ids, groups=features.groups, point_score=propensity(params, features.X))


def select_draws(n_draws: int, k: int, seed: int) -> np.ndarray:
    """
    Row indices of ``k`` draws chosen uniformly without replacement from the score stage's seed stream.

    Raises:
    InputError: if k exceeds the number of draws.
    """
    if k > n_draws:
        raise InputError(f"cannot select {k} uncertainty draws from {n_draws} posterior draws")
    return stage_rng(seed, "score").choice(n_draws, size=k, replace=False)


def score_uncertainty(
    draws: Union[PosteriorDraws, np.ndarray], features: FeatureMatrix, k: int = 25, seed: int = 0
) -> np.ndarray:
    """
    Propensities of every unit under ``k`` randomly selected posterior draws.

    Returns:
    np.ndarray: k x N matrix; row j scores all units with the j-th selected draw.
    """
    values = _draw_matrix(draws)
    rows = values[select_draws(values.shape[0], k, seed)]
    if k:
        _check_features(ParamVector.from_array(rows[0]), features)
    return np.array([propensity(row, features.X) for row in rows]).reshape(k, features.n_units)


def score_table(
    draws: Union[PosteriorDraws, np.ndarray], features: FeatureMatrix, k: int = 25, seed: int = 0
) -> ScoreTable:
    """Point scores plus ``k`` uncertainty rows (none when k is 0)."""
    table = score_all(point_estimate(draws), features)
    if k:
        table.draw_scores = score_uncertainty(draws, features, k=k, seed=seed)
    return table


def matching_scores(table: ScoreTable, source: str = "point") -> np.ndarray:
    if source not in SCORE_SOURCES:
        raise InputError(f"unknown score source '{source}', expected one of {', '.join(SCORE_SOURCES)}")
    if source == "draw_mean":
        if table.draw_scores is None:
            raise InputError("draw_mean scores need uncertainty draws (uncertainty_draws > 0)")
        return table.draw_mean_score
    return table.point_score


def _stats(values: np.ndarray) -> Dict[str, Optional[float]]:
    if values.size == 0:
        return {"mean": None, "sd": None, "n": 0}
    return {"mean": float(values.mean()), "sd": float(values.std(ddof=1)) if values.size > 1 else 0.0, "n": values.size}


def group_stats(table: ScoreTable) -> Dict[str, Dict[str, Dict[str, Optional[float]]]]:
    """Mean and sd of each labelled score by group (``control``/``treated``)."""
    sources = {"point_score": table.point_score}
    if table.draw_scores is not None:
        sources["draw_mean_score"] = table.draw_mean_score
    return {
        label: {
            "control": _stats(values[table.groups == CONTROL]),
            "treated": _stats(values[table.groups == TREATMENT]),
        }
        for label, values in sources.items()
    }


def propensity_table(table: ScoreTable, pairs: MatchedPairs, source: str = "point") -> pd.DataFrame:
    """
    Group mean and sd of the matching score for all units and for the matched subsets.
    """
    scores = matching_scores(table, source)
    index = {uid: i for i, uid in enumerate(table.unit_ids)}
    subsets = {
        ("before", "control"): np.flatnonzero(table.groups == CONTROL),
        ("before", "treated"): np.flatnonzero(table.groups == TREATMENT),
        ("after", "control"): np.array([index[u] for u in pairs.control_ids], dtype=int),
        ("after", "treated"): np.array([index[u] for u in pairs.treated_ids], dtype=int),
    }
    records = [{"stage": stage, "group": group, **_stats(scores[idx])} for (stage, group), idx in subsets.items()]
    return pd.DataFrame.from_records(records, columns=["stage", "group", "mean", "sd", "n"])


def scores_frame(table: ScoreTable) -> pd.DataFrame:
    frame = pd.DataFrame({"unit_id": table.unit_ids, "group": table.groups, "point_score": table.point_score})
    if table.draw_scores is not None:
        frame["draw_mean_score"] = table.draw_mean_score
    return frame


def draw_scores_frame(table: ScoreTable) -> pd.DataFrame:
    """Wide table: one row per selected draw, one column per unit."""
    frame = pd.DataFrame(table.draw_scores, columns=table.unit_ids)
    frame.insert(0, "draw", np.arange(frame.shape[0]))
    return frame


def scores_from_frame(frame: pd.DataFrame) -> ScoreTable:
    missing = [c for c in ("unit_id", "group", "point_score") if c not in frame.columns]
    if missing:
        raise InputError(f"scores table is missing columns: {', '.join(missing)}")
    table = ScoreTable(
        unit_ids=frame["unit_id"].astype(str), groups=frame["group"], point_score=frame["point_score"].to_numpy()
    )
    if "draw_mean_score" in frame.columns:
        table.draw_scores = frame["draw_mean_score"].to_numpy(dtype=float).reshape(1, -1)
    return table
