"""
Greedy 1:1 propensity-score matching without replacement.

Treated units are visited in the configured order (default: descending score, ties by unit ID). Each takes the nearest
control that is still free; controls are kept sorted by unit ID so equal distances resolve to the lexicographically
smallest ID. ``caliper`` leaves a treated unit unmatched when its nearest free control is farther than the width;
``nn1`` always matches and therefore needs at least as many controls as treated units.
"""
import math
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from boat_match.config import stage_rng
from boat_match.errors import InputError, MatchingInfeasibleError
from boat_match.log import log
from boat_match.records import CONTROL, TREATMENT, MatchConfig, MatchedPair, MatchedPairs, ScoreTable
from boat_match.scoring import matching_scores

ORDERS = ("descending_score", "input_order", "random")


def score_distance(p_control: float, p_treated: float) -> float:
    return abs(p_control - p_treated)


def _treated_order(ids: List[str], scores: np.ndarray, order: str, seed: int) -> List[int]:
    if order == "descending_score":
        return sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    if order == "input_order":
        return list(range(len(ids)))
    if order == "random":
        return [int(i) for i in stage_rng(seed, "match").permutation(len(ids))]
    raise InputError(f"unknown matching order '{order}', expected one of {', '.join(ORDERS)}")


def _greedy(
    table: ScoreTable,
    width: Optional[float],
    method: str,
    order: str = "descending_score",
    seed: int = 0,
    source: str = "point",
) -> MatchedPairs:
    scores = matching_scores(table, source)
    treated = np.flatnonzero(table.groups == TREATMENT)
    control = sorted(np.flatnonzero(table.groups == CONTROL), key=lambda i: table.unit_ids[i])
    treated_ids = [table.unit_ids[i] for i in treated]
    control_ids = [table.unit_ids[i] for i in control]
    control_scores = scores[control] if control else np.empty(0)
    available = np.ones(len(control), dtype=bool)

    pairs: List[MatchedPair] = []
    unmatched: List[str] = []
    for t in _treated_order(treated_ids, scores[treated], order, seed):
        p_treated = scores[treated[t]]
        distances = np.where(available, np.abs(control_scores - p_treated), np.inf)
        if distances.size == 0 or not np.isfinite(distances.min()):
            unmatched.append(treated_ids[t])
            continue
        c = int(np.argmin(distances))
        if width is not None and distances[c] > width:
            unmatched.append(treated_ids[t])
            continue
        available[c] = False
        pairs.append(MatchedPair(treated_id=treated_ids[t], control_id=control_ids[c], delta_p=float(distances[c])))
    return MatchedPairs(pairs=pairs, unmatched_treated=unmatched, method=method)


def caliper_match(
    scores: ScoreTable, width: float = 0.05, order: str = "descending_score", seed: int = 0, source: str = "point"
) -> MatchedPairs:
    """
    Nearest free control within ``width`` for each treated unit; treated units with none are left unmatched.
    """
    if width <= 0:
        raise ValueError(f"caliper width must be positive, got {width}")
    pairs = _greedy(scores, width, "caliper", order=order, seed=seed, source=source)
    if pairs.unmatched_treated:
        log.info(f"caliper {width}: {len(pairs.unmatched_treated)} treated units left unmatched")
    return pairs


def nn1_match(
    scores: ScoreTable, order: str = "descending_score", seed: int = 0, source: str = "point"
) -> MatchedPairs:
    """
    Nearest free control for each treated unit, regardless of distance.

    Raises:
    MatchingInfeasibleError: when there are fewer controls than treated units.
    """
    n_control = int(np.sum(scores.groups == CONTROL))
    n_treated = int(np.sum(scores.groups == TREATMENT))
    if n_control < n_treated:
        raise MatchingInfeasibleError(n_control, n_treated)
    return _greedy(scores, None, "nn1", order=order, seed=seed, source=source)


def match(scores: ScoreTable, config: MatchConfig, source: str = "point") -> MatchedPairs:
    if config.method == "caliper":
        return caliper_match(scores, config.width, order=config.order, seed=config.seed, source=source)
    return nn1_match(scores, order=config.order, seed=config.seed, source=source)


def _moments(values: Sequence[float]) -> Dict[str, Optional[float]]:
    """Order-independent mean and sample sd."""
    n = len(values)
    if n == 0:
        return {"mean": None, "sd": None}
    mean = math.fsum(values) / n
    sd = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else 0.0
    return {"mean": mean, "sd": sd}


def match_summary(pairs: MatchedPairs, scores: ScoreTable, source: str = "point") -> Dict[str, object]:
    """
    Score moments of the treated units and their matched controls, mean distance and match rate. An empty pairs list
    gives match rate 0, undefined (None) means and ``empty`` set.
    """
    values = matching_scores(scores, source)
    by_id = dict(zip(scores.unit_ids, values))
    n_treated = int(np.sum(scores.groups == TREATMENT))
    deltas = sorted(p.delta_p for p in pairs.pairs)
    return {
        "method": pairs.method,
        "score_source": source,
        "n_treated": n_treated,
        "n_control": int(np.sum(scores.groups == CONTROL)),
        "n_pairs": len(pairs),
        "n_unmatched_treated": len(pairs.unmatched_treated),
        "match_rate": len(pairs) / n_treated if n_treated else 0.0,
        "empty": len(pairs) == 0,
        "delta_p": {**_moments(deltas), "max": deltas[-1] if deltas else None},
        "treated_score": _moments(sorted(by_id[u] for u in pairs.treated_ids)),
        "matched_control_score": _moments(sorted(by_id[u] for u in pairs.control_ids)),
        "control_score": _moments(sorted(values[scores.groups == CONTROL].tolist())),
    }


def pairs_frame(pairs: MatchedPairs) -> pd.DataFrame:
    return pd.DataFrame.from_records(
        [p.as_dict() for p in pairs.pairs], columns=["treated_id", "control_id", "delta_p"]
    )


def unmatched_frame(pairs: MatchedPairs) -> pd.DataFrame:
    return pd.DataFrame({"treated_id": pairs.unmatched_treated}, dtype=str)


def pairs_from_frame(frame: pd.DataFrame, method: str = "caliper") -> MatchedPairs:
    """
    Rebuilds pairs from a pairs table.

    Raises:
    InputError: when a column is missing or a unit appears in two pairs.
    """
    missing = [c for c in ("treated_id", "control_id", "delta_p") if c not in frame.columns]
    if missing:
        raise InputError(f"pairs table is missing columns: {', '.join(missing)}")
    treated = frame["treated_id"].astype(str).tolist()
    control = frame["control_id"].astype(str).tolist()
    if len(set(treated)) != len(treated) or len(set(control)) != len(control):
        raise InputError("pairs table reuses a unit; matching is without replacement")
    return MatchedPairs(
        pairs=[MatchedPair(t, c, float(d)) for t, c, d in zip(treated, control, frame["delta_p"])],
        method=method,
    )
