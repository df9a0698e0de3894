import numpy as np
import pytest

from boat_match.errors import InputError
from boat_match.matching import caliper_match
from boat_match.records import FeatureMatrix, ParamVector, ScoreTable
from boat_match.scoring import (
    draw_scores_frame,
    group_stats,
    matching_scores,
    point_estimate,
    propensity_table,
    score_all,
    score_table,
    scores_frame,
    scores_from_frame,
    select_draws,
)


@pytest.fixture
def features(features_factory):
    return features_factory([0, 0, 1, 1], [[0.1, 0.2], [0.5, 0.5], [0.9, 0.1], [0.3, 0.7]])


def test_score_all(features):
    table = score_all(ParamVector(alpha=0.5, beta=[0.0, 0.0]), features)
    assert table.point_score == pytest.approx([0.622459] * 4, abs=1e-6)
    assert table.unit_ids == ["u0", "u1", "u2", "u3"]


def test_score_all_requires_scaled_features():
    raw = FeatureMatrix(unit_ids=["a", "b"], groups=[0, 1], target=[10.0, 12.0], X=[[40.0], [55.0]], columns=("x",))
    with pytest.raises(InputError, match="scaled"):
        score_all(ParamVector(alpha=0.0, beta=[1.0]), raw)


def test_score_all_checks_dimension(features):
    with pytest.raises(InputError, match="covariates"):
        score_all(ParamVector(alpha=0.0, beta=[1.0, 1.0, 1.0]), features)


def test_point_estimate():
    params = point_estimate(np.array([[0.0, 1.0, 2.0], [2.0, 3.0, 4.0]]))
    assert params.alpha == 1.0
    assert list(params.beta) == [2.0, 3.0]


def test_select_draws():
    chosen = select_draws(100, 25, seed=3)
    assert len(set(chosen.tolist())) == 25
    assert np.array_equal(chosen, select_draws(100, 25, seed=3))
    with pytest.raises(InputError, match="cannot select"):
        select_draws(10, 11, seed=0)


def test_score_table_with_uncertainty(features):
    draws = np.random.default_rng(0).normal(size=(40, 3))
    table = score_table(draws, features, k=5, seed=1)
    assert table.draw_scores.shape == (5, 4)
    assert np.all((table.draw_scores > 0) & (table.draw_scores < 1))
    assert table.draw_mean_score == pytest.approx(table.draw_scores.mean(axis=0))
    assert not np.allclose(table.draw_mean_score, table.point_score)


def test_matching_scores_sources(features):
    table = score_table(np.zeros((10, 3)), features, k=0)
    assert matching_scores(table) is table.point_score
    with pytest.raises(InputError, match="uncertainty draws"):
        matching_scores(table, "draw_mean")
    with pytest.raises(InputError, match="unknown score source"):
        matching_scores(table, "median")


def test_group_stats():
    table = ScoreTable(unit_ids=["a", "b", "c"], groups=[0, 0, 1], point_score=[0.2, 0.4, 0.7])
    stats = group_stats(table)["point_score"]
    assert stats["control"]["mean"] == pytest.approx(0.3)
    assert stats["treated"] == {"mean": pytest.approx(0.7), "sd": 0.0, "n": 1}


def test_propensity_table():
    table = ScoreTable(unit_ids=["c1", "c2", "t1"], groups=[0, 0, 1], point_score=[0.25, 0.5, 0.5])
    frame = propensity_table(table, caliper_match(table, width=0.1))
    after = frame[frame["stage"] == "after"].set_index("group")
    assert after.loc["control", "mean"] == 0.5
    assert after.loc["treated", "n"] == 1


def test_scores_frame_round_trip(features):
    table = score_table(np.random.default_rng(2).normal(size=(10, 3)), features, k=3, seed=0)
    restored = scores_from_frame(scores_frame(table))
    assert restored.unit_ids == table.unit_ids
    assert restored.draw_mean_score == pytest.approx(table.draw_mean_score)
    wide = draw_scores_frame(table)
    assert list(wide.columns) == ["draw", "u0", "u1", "u2", "u3"]
