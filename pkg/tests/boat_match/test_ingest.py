import io

import numpy as np
import pytest

from boat_match.errors import InputError
from boat_match.ingest import (
    aggregate_unit,
    aggregate_units,
    describe_groups,
    filter_cycles,
    join_groups,
    minmax_scale,
    parse_cycles,
    read_assignment,
    unscale,
)
from boat_match.records import COVARIATES, FeatureMatrix


def _records(trips_path):
    with open(trips_path, newline="") as fd:
        return parse_cycles(fd)


def _unit_rows(trips_path, assignment_path):
    records, _ = _records(trips_path)
    kept, _ = filter_cycles(records)
    rows, _ = aggregate_units(kept)
    with open(assignment_path, newline="") as fd:
        return join_groups(rows, read_assignment(fd))


def test_parse_cycles_rejects_bad_rows(trips_path):
    records, rejects = _records(trips_path)
    assert len(records) == 8
    assert sorted(r.cycle_id for r in rejects) == ["c11", "c7"]
    reasons = {r.cycle_id: r.reason for r in rejects}
    assert "distance" in reasons["c7"]
    assert "soc_start" in reasons["c11"]


def test_parse_cycles_converts_types(trips_path):
    records, _ = _records(trips_path)
    boundary = next(r for r in records if r.cycle_id == "c5")
    assert boundary.trailer_attached is True
    assert boundary.engine_starts == 2
    assert boundary.start_time.tzinfo is not None
    assert boundary.start_time.weekday() == 1


def test_parse_cycles_missing_column():
    stream = io.StringIO("unit_id,cycle_id\nu1,c1\n")
    with pytest.raises(InputError, match="missing required columns"):
        parse_cycles(stream)


def test_parse_cycles_empty_stream():
    assert parse_cycles(io.StringIO("")) == ([], [])


def test_filter_cycles_reasons(trips_path):
    records, _ = _records(trips_path)
    kept, excluded = filter_cycles(records)
    assert sorted(r.cycle_id for r in kept) == ["c1", "c10", "c2", "c5", "c8", "c9"]
    reasons = {r.cycle_id: reason for r, reason in excluded}
    assert reasons == {
        "c3": "odometer < 100 km",
        "c6": "avg_speed > 200 km/h; distance < 0.5 km; duration < 60 s",
    }


def test_filter_cycles_keeps_boundary_values(trips_path):
    records, _ = _records(trips_path)
    kept, _ = filter_cycles(records)
    boundary = next(r for r in kept if r.cycle_id == "c5")
    assert (boundary.distance, boundary.duration, boundary.odometer, boundary.avg_speed) == (0.5, 60, 100, 200)


def test_aggregate_unit_covariates(trips_path):
    records, _ = _records(trips_path)
    kept, _ = filter_cycles(records)
    row = aggregate_unit([r for r in kept if r.unit_id == "u1"])
    expected = {
        "share_soc_start_high": 0.5,
        "share_soc_end_low": 0.5,
        "n_weekday_trips": 1.0,
        "n_weekend_trips": 1.0,
        "avg_trip_distance": 20.0,
        "max_trip_distance": 30.0,
        "avg_trip_speed": 60.0,
        "max_trip_speed": 100.0,
        "share_distance_hybrid": 0.125,
        "share_trips_trailer": 0.5,
        "avg_engine_starts": 2.0,
        "temp_avg": 22.5,
        "temp_min": 18.0,
        "temp_max": 30.0,
    }
    for name, value in expected.items():
        assert row.covariate(name) == pytest.approx(value), name
    assert row.target == pytest.approx(35.0)


def test_aggregate_unit_is_order_independent(trips_path):
    records, _ = _records(trips_path)
    kept, _ = filter_cycles(records)
    u1 = [r for r in kept if r.unit_id == "u1"]
    assert aggregate_unit(u1) == aggregate_unit(list(reversed(u1)))


def test_aggregate_unit_rejects_mixed_units(trips_path):
    records, _ = _records(trips_path)
    with pytest.raises(ValueError, match="more than one unit"):
        aggregate_unit(records)


def test_join_groups_drops_unassigned(trips_path, assignment_path, caplog):
    rows = _unit_rows(trips_path, assignment_path)
    assert [(r.unit_id, r.group) for r in rows] == [("u1", 0), ("u2", 0), ("u3", 1), ("u4", 1)]
    assert "u6 has no group assignment" in caplog.text


@pytest.mark.parametrize(
    "content, message",
    [
        ("unit_id,group\nu1,2\n", "group must be 0 or 1"),
        ("unit_id,group\nu1,0\nu1,1\n", "both groups"),
        ("unit,grp\nu1,0\n", "must have columns"),
    ],
)
def test_read_assignment_errors(content, message):
    with pytest.raises(InputError, match=message):
        read_assignment(io.StringIO(content))


def test_minmax_scale(trips_path, assignment_path):
    matrix = FeatureMatrix.from_rows(_unit_rows(trips_path, assignment_path))
    scaled = minmax_scale(matrix)
    assert scaled.scaled
    assert scaled.X.min() >= 0.0 and scaled.X.max() <= 1.0
    # targets 35, 80, 40, 30 g/km
    assert scaled.target == pytest.approx([0.1, 1.0, 0.2, 0.0])
    assert scaled.scaling_params["target"] == (30.0, 80.0)
    restored = unscale(scaled)
    assert np.allclose(restored.X, matrix.X)


def test_minmax_scale_constant_column(caplog):
    matrix = FeatureMatrix(
        unit_ids=["a", "b", "c"],
        groups=[0, 1, 0],
        target=[1.0, 2.0, 3.0],
        X=[[5.0, 1.0], [5.0, 2.0], [5.0, 4.0]],
        columns=("flat", "slope"),
    )
    scaled = minmax_scale(matrix)
    assert np.all(scaled.X[:, 0] == 0.0)
    assert scaled.X[:, 1] == pytest.approx([0.0, 1 / 3, 1.0])
    assert "column 'flat' is constant" in caplog.text


def test_minmax_scale_preconditions():
    single = FeatureMatrix(unit_ids=["a"], groups=[0], target=[1.0], X=[[1.0]], columns=("x",))
    with pytest.raises(ValueError, match="at least 2 units"):
        minmax_scale(single)
    pair = FeatureMatrix(unit_ids=["a", "b"], groups=[0, 1], target=[1.0, 2.0], X=[[1.0], [2.0]], columns=("x",))
    with pytest.raises(ValueError, match="already scaled"):
        minmax_scale(minmax_scale(pair))


def test_describe_groups(trips_path, assignment_path):
    matrix = minmax_scale(FeatureMatrix.from_rows(_unit_rows(trips_path, assignment_path)))
    frame = describe_groups(matrix)
    assert len(frame) == 2 * (1 + len(COVARIATES))
    target_control = frame[(frame["variable"] == "target") & (frame["group"] == "control")].iloc[0]
    assert target_control["mean"] == pytest.approx(0.55)
    assert target_control["n"] == 2


CLEAN_CYCLE = {
    "unit_id": "u1",
    "cycle_id": "c1",
    "start_time": "2023-06-05T08:00:00Z",
    "distance": 10,
    "duration": 600,
    "fuel": 500,
    "odometer": 1000,
    "soc_start": 50,
    "soc_end": 50,
    "avg_speed": 60,
    "max_speed": 80,
    "hybrid_distance": 0,
    "trailer_attached": 0,
    "engine_starts": 1,
    "ambient_temp_avg": 20,
    "ambient_temp_min": 18,
    "ambient_temp_max": 22,
}


def _cycles(*changes):
    """Parses one CSV row per mapping in ``changes``, each applied on top of a clean cycle."""
    header = list(CLEAN_CYCLE)
    lines = [",".join(header)]
    for i, change in enumerate(changes):
        row = {**CLEAN_CYCLE, "cycle_id": f"c{i}", **change}
        lines.append(",".join(str(row[name]) for name in header))
    return parse_cycles(io.StringIO("\n".join(lines) + "\n"))


def test_parse_cycles_single_valid_row():
    records, rejects = _cycles({})
    assert len(records) == 1
    assert rejects == []


def test_parse_cycles_rejects_unparseable_soc():
    records, rejects = _cycles({"soc_start": "abc"})
    assert records == []
    assert len(rejects) == 1
    assert "soc_start" in rejects[0].reason
    assert "abc" in rejects[0].reason


def test_parse_cycles_rejects_negative_distance():
    records, rejects = _cycles({}, {"distance": -1}, {})
    assert [r.cycle_id for r in records] == ["c0", "c2"]
    assert [r.cycle_id for r in rejects] == ["c1"]
    assert "distance" in rejects[0].reason


@pytest.mark.parametrize(
    "change, reason",
    [
        ({"odometer": 99.9}, "odometer < 100 km"),
        ({"avg_speed": 200.1}, "avg_speed > 200 km/h"),
        ({"distance": 0.3, "hybrid_distance": 0}, "distance < 0.5 km"),
        ({"duration": 59}, "duration < 60 s"),
    ],
)
def test_filter_cycles_single_rule(change, reason):
    records, _ = _cycles(change)
    kept, excluded = filter_cycles(records)
    assert kept == []
    assert [r for _, r in excluded] == [reason]


def test_filter_cycles_one_violation_per_rule():
    records, _ = _cycles({"odometer": 50}, {"avg_speed": 250}, {"distance": 0.3}, {"duration": 30}, {})
    kept, excluded = filter_cycles(records)
    assert [r.cycle_id for r in kept] == ["c4"]
    assert {r.cycle_id: reason for r, reason in excluded} == {
        "c0": "odometer < 100 km",
        "c1": "avg_speed > 200 km/h",
        "c2": "distance < 0.5 km",
        "c3": "duration < 60 s",
    }
    assert filter_cycles(kept) == (kept, [])


def test_filter_cycles_keeps_odometer_boundary():
    records, _ = _cycles({"odometer": 100, "avg_speed": 80, "distance": 10, "duration": 600})
    kept, excluded = filter_cycles(records)
    assert len(kept) == 1
    assert excluded == []


def test_aggregate_unit_two_trips():
    records, _ = _cycles(
        {"distance": 10, "fuel": 500, "soc_start": 90, "soc_end": 15, "start_time": "2023-06-05T08:00:00Z"},
        {"distance": 20, "fuel": 1000, "soc_start": 50, "soc_end": 30, "start_time": "2023-06-10T08:00:00Z"},
    )
    row = aggregate_unit(records)
    assert row.target == pytest.approx(50.0)
    assert row.covariate("share_soc_start_high") == pytest.approx(0.5)
    assert row.covariate("share_soc_end_low") == pytest.approx(0.5)
    assert row.covariate("n_weekday_trips") == 1
    assert row.covariate("n_weekend_trips") == 1
    assert row.covariate("avg_trip_distance") == pytest.approx(15.0)
    assert row.covariate("max_trip_distance") == pytest.approx(20.0)
    assert row.covariate("share_trips_trailer") == 0.0


def test_aggregate_unit_single_trip():
    records, _ = _cycles({"distance": 12})
    row = aggregate_unit(records)
    assert row.covariate("avg_trip_distance") == row.covariate("max_trip_distance") == pytest.approx(12.0)
