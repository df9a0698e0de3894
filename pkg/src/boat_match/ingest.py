"""
Module: ingest

Turns per-trip telemetry into the per-unit feature matrix the propensity model is fitted on.

Steps:
1. ``parse_cycles``: read the trips CSV; rows that fail to parse or violate a record invariant become rejects.
2. ``filter_cycles``: drop drive cycles from brand-new units (odometer < 100 km), implausible cycles (average speed
   > 200 km/h) and very short cycles (distance < 0.5 km or duration < 60 s). Boundary values are kept.
3. ``aggregate_unit`` / ``aggregate_units``: one row of 14 covariates plus the fuel consumption target per unit.
4. ``join_groups``: attach control/treatment labels from the assignment CSV.
5. ``minmax_scale``: scale every column to [0, 1] over all units pooled.
"""
import csv
import math
from collections import defaultdict
from typing import Dict, Iterable, List, TextIO, Tuple

import numpy as np
import pandas as pd

from boat_match.errors import InputError
from boat_match.log import log
from boat_match.records import (
    COVARIATES,
    TARGET,
    DriveCycleRecord,
    FeatureMatrix,
    Reject,
    UnitFeatureRow,
)

MIN_ODOMETER_KM = 100.0
MAX_AVG_SPEED_KMH = 200.0
MIN_DISTANCE_KM = 0.5
MIN_DURATION_S = 60.0
SOC_HIGH_PERCENT = 80.0
SOC_LOW_PERCENT = 21.0

CYCLE_FIELDS = DriveCycleRecord.fields()
FLOAT_FIELDS = (
    "distance",
    "duration",
    "fuel",
    "odometer",
    "soc_start",
    "soc_end",
    "avg_speed",
    "max_speed",
    "hybrid_distance",
    "ambient_temp_avg",
    "ambient_temp_min",
    "ambient_temp_max",
)
TRUE_VALUES = ("1", "true", "t", "yes", "y")
FALSE_VALUES = ("0", "false", "f", "no", "n", "")


class CellError(ValueError):
    def __init__(self, column: str, value: str, expected: str):
        super().__init__(f"{column}: cannot parse '{value}' as {expected}")


def _parse_float(column: str, value: str) -> float:
    try:
        parsed = float(value)
    except (TypeError, ValueError) as exc:
        raise CellError(column, value, "a number") from exc
    if not math.isfinite(parsed):
        raise CellError(column, value, "a finite number")
    return parsed


def _parse_int(column: str, value: str) -> int:
    parsed = _parse_float(column, value)
    if not parsed.is_integer():
        raise CellError(column, value, "an integer")
    return int(parsed)


def _parse_bool(column: str, value: str) -> bool:
    lowered = (value or "").strip().lower()
    if lowered in TRUE_VALUES:
        return True
    if lowered in FALSE_VALUES:
        return False
    raise CellError(column, value, "a boolean")


def _parse_timestamp(column: str, value: str):
    try:
        stamp = pd.Timestamp(value)
    except (TypeError, ValueError) as exc:
        raise CellError(column, value, "a timestamp") from exc
    if stamp is pd.NaT:
        raise CellError(column, value, "a timestamp")
    stamp = stamp.tz_localize("UTC") if stamp.tzinfo is None else stamp.tz_convert("UTC")
    return stamp.to_pydatetime()


def _parse_row(row: Dict[str, str]) -> DriveCycleRecord:
    values = {
        "unit_id": (row["unit_id"] or "").strip(),
        "cycle_id": (row["cycle_id"] or "").strip(),
        "start_time": _parse_timestamp("start_time", row["start_time"]),
        "trailer_attached": _parse_bool("trailer_attached", row["trailer_attached"]),
        "engine_starts": _parse_int("engine_starts", row["engine_starts"]),
    }
    if not values["unit_id"]:
        raise ValueError("unit_id: empty")
    for column in FLOAT_FIELDS:
        values[column] = _parse_float(column, row[column])
    return DriveCycleRecord.from_values(values)


def parse_cycles(csv_stream: TextIO) -> Tuple[List[DriveCycleRecord], List[Reject]]:
    """
    Parses a trips CSV stream.

    Parameters:
    csv_stream: text stream whose header names every DriveCycleRecord field (extra columns are ignored).

    Returns:
    (records, rejects): one record per valid data row, and one Reject per row that could not be parsed or violates
    a record invariant. The reject reason names the offending column.

    Raises:
    InputError: when the header lacks a required column. An empty stream yields no records.
    """
    reader = csv.DictReader(csv_stream)
    if reader.fieldnames is None:
        log.warning("trips CSV is empty")
        return [], []
    header = [name.strip() for name in reader.fieldnames]
    reader.fieldnames = header
    missing = [name for name in CYCLE_FIELDS if name not in header]
    if missing:
        raise InputError(f"trips CSV is missing required columns: {', '.join(missing)}")

    records = []
    rejects = []
    for line_no, row in enumerate(reader, start=2):
        try:
            records.append(_parse_row(row))
        except (ValueError, TypeError) as exc:
            reason = f"line {line_no}: {exc}"
            rejects.append(Reject(unit_id=row.get("unit_id") or "", cycle_id=row.get("cycle_id") or "", reason=reason))
            log.debug(f"rejected row: {reason}")
    log.info(f"parsed {len(records)} drive cycles, {len(rejects)} rejected rows")
    return records, rejects


def exclusion_reasons(record: DriveCycleRecord) -> List[str]:
    reasons = []
    if record.odometer < MIN_ODOMETER_KM:
        reasons.append(f"odometer < {MIN_ODOMETER_KM:g} km")
    if record.avg_speed > MAX_AVG_SPEED_KMH:
        reasons.append(f"avg_speed > {MAX_AVG_SPEED_KMH:g} km/h")
    if record.distance < MIN_DISTANCE_KM:
        reasons.append(f"distance < {MIN_DISTANCE_KM:g} km")
    if record.duration < MIN_DURATION_S:
        reasons.append(f"duration < {MIN_DURATION_S:g} s")
    return reasons


def filter_cycles(
    records: Iterable[DriveCycleRecord],
) -> Tuple[List[DriveCycleRecord], List[Tuple[DriveCycleRecord, str]]]:
    """
    Applies the drive-cycle exclusion rules. All comparisons are strict, so a cycle sitting exactly on a threshold
    is kept.

    Returns:
    (kept, excluded): excluded pairs each record with its reasons joined by "; ".
    """
    kept = []
    excluded = []
    for record in records:
        reasons = exclusion_reasons(record)
        if reasons:
            excluded.append((record, "; ".join(reasons)))
        else:
            kept.append(record)
    log.info(f"kept {len(kept)} drive cycles, excluded {len(excluded)}")
    return kept, excluded


def exclusions_as_rejects(excluded: List[Tuple[DriveCycleRecord, str]]) -> List[Reject]:
    return [Reject(unit_id=r.unit_id, cycle_id=r.cycle_id, reason=reason) for r, reason in excluded]


def aggregate_unit(records: List[DriveCycleRecord]) -> UnitFeatureRow:
    """
    Aggregates one unit's kept drive cycles into its covariate row and fuel consumption target.

    Sums use ``math.fsum`` so the result does not depend on record order.

    Raises:
    ValueError: when the records are empty, mix units, or have zero total distance or duration.
    """
    if not records:
        raise ValueError("no drive cycles to aggregate")
    unit_id = records[0].unit_id
    if any(r.unit_id != unit_id for r in records):
        raise ValueError("records belong to more than one unit")

    count = len(records)
    total_distance = math.fsum(r.distance for r in records)
    total_duration = math.fsum(r.duration for r in records)
    if total_distance == 0:
        raise ValueError("total distance is 0, cannot form fuel consumption")
    if total_duration == 0:
        raise ValueError("total duration is 0, cannot form average speed")

    weekend = sum(1 for r in records if r.start_time.weekday() >= 5)
    values = {
        "share_soc_start_high": sum(1 for r in records if r.soc_start > SOC_HIGH_PERCENT) / count,
        "share_soc_end_low": sum(1 for r in records if r.soc_end < SOC_LOW_PERCENT) / count,
        "n_weekday_trips": float(count - weekend),
        "n_weekend_trips": float(weekend),
        "avg_trip_distance": total_distance / count,
        "max_trip_distance": max(r.distance for r in records),
        "avg_trip_speed": total_distance / (total_duration / 3600.0),
        "max_trip_speed": max(r.max_speed for r in records),
        "share_distance_hybrid": math.fsum(r.hybrid_distance for r in records) / total_distance,
        "share_trips_trailer": sum(1 for r in records if r.trailer_attached) / count,
        "avg_engine_starts": sum(r.engine_starts for r in records) / count,
        "temp_avg": math.fsum(r.ambient_temp_avg for r in records) / count,
        "temp_min": min(r.ambient_temp_min for r in records),
        "temp_max": max(r.ambient_temp_max for r in records),
    }
    target = math.fsum(r.fuel for r in records) / total_distance
    return UnitFeatureRow(unit_id=unit_id, target=target, covariates=tuple(values[c] for c in COVARIATES))


def aggregate_units(records: Iterable[DriveCycleRecord]) -> Tuple[List[UnitFeatureRow], List[Reject]]:
    """
    Groups kept records by unit (units sorted by ID) and aggregates each. Units that cannot be aggregated become
    rejects with an empty cycle_id.
    """
    by_unit = defaultdict(list)
    for record in records:
        by_unit[record.unit_id].append(record)
    rows = []
    rejects = []
    for unit_id in sorted(by_unit):
        try:
            rows.append(aggregate_unit(by_unit[unit_id]))
        except ValueError as exc:
            rejects.append(Reject(unit_id=unit_id, cycle_id="", reason=str(exc)))
            log.warning(f"unit {unit_id} rejected: {exc}")
    return rows, rejects


def read_assignment(csv_stream: TextIO) -> Dict[str, int]:
    """
    Reads the ``unit_id,group`` assignment CSV.

    Raises:
    InputError: on missing columns, a group outside {0, 1}, or a unit listed twice with different groups.
    """
    reader = csv.DictReader(csv_stream)
    if reader.fieldnames is None or not {"unit_id", "group"} <= {n.strip() for n in reader.fieldnames}:
        raise InputError("assignment CSV must have columns unit_id,group")
    reader.fieldnames = [n.strip() for n in reader.fieldnames]
    assignment = {}
    for line_no, row in enumerate(reader, start=2):
        unit_id = (row["unit_id"] or "").strip()
        group = (row["group"] or "").strip()
        if group not in ("0", "1"):
            raise InputError(f"assignment line {line_no}: group must be 0 or 1, got '{group}'")
        if unit_id in assignment and assignment[unit_id] != int(group):
            raise InputError(f"assignment line {line_no}: unit {unit_id} assigned to both groups")
        assignment[unit_id] = int(group)
    return assignment


def join_groups(rows: List[UnitFeatureRow], assignment: Dict[str, int]) -> List[UnitFeatureRow]:
    """
    Sets each row's group from the assignment. Rows without an assignment are dropped with a warning.
    """
    joined = []
    for row in rows:
        if row.unit_id not in assignment:
            log.warning(f"unit {row.unit_id} has no group assignment, dropped")
            continue
        joined.append(UnitFeatureRow(row.unit_id, row.target, row.covariates, group=assignment[row.unit_id]))
    unused = set(assignment) - {r.unit_id for r in rows}
    if unused:
        log.debug(f"{len(unused)} assigned units have no kept drive cycles")
    return joined


def minmax_scale(matrix: FeatureMatrix) -> FeatureMatrix:
    """
    Scales every covariate and the target to [0, 1] with the pooled min and max of all units.

    A constant column cannot be scaled; it is set to 0.0 everywhere and a warning names it.

    Returns:
    FeatureMatrix: a new, scaled matrix whose ``scaling_params`` hold each column's (min, max).

    Raises:
    ValueError: if the matrix is already scaled or has fewer than 2 units.
    """
    if matrix.scaled:
        raise ValueError("feature matrix is already scaled")
    if matrix.n_units < 2:
        raise ValueError(f"min-max scaling needs at least 2 units, got {matrix.n_units}")

    params = {}

    def _scale(column: np.ndarray, name: str) -> np.ndarray:
        low, high = float(column.min()), float(column.max())
        params[name] = (low, high)
        if high == low:
            log.warning(f"column '{name}' is constant ({low:g}); scaled to 0.0")
            return np.zeros_like(column)
        return (column - low) / (high - low)

    X = np.column_stack([_scale(matrix.X[:, j], name) for j, name in enumerate(matrix.columns)])
    target = _scale(matrix.target, TARGET)
    return FeatureMatrix(
        unit_ids=matrix.unit_ids,
        groups=matrix.groups,
        target=target,
        X=X,
        columns=matrix.columns,
        scaling_params=params,
        scaled=True,
    )


def unscale(matrix: FeatureMatrix) -> FeatureMatrix:
    """Inverse of ``minmax_scale``. Constant columns come back as their constant."""
    if not matrix.scaled or not matrix.scaling_params:
        raise ValueError("feature matrix carries no scaling parameters")

    def _unscale(column: np.ndarray, name: str) -> np.ndarray:
        low, high = matrix.scaling_params[name]
        if high == low:
            return np.full_like(column, low)
        return column * (high - low) + low

    X = np.column_stack([_unscale(matrix.X[:, j], name) for j, name in enumerate(matrix.columns)])
    return FeatureMatrix(
        unit_ids=matrix.unit_ids,
        groups=matrix.groups,
        target=_unscale(matrix.target, TARGET),
        X=X,
        columns=matrix.columns,
    )


def describe_groups(matrix: FeatureMatrix) -> pd.DataFrame:
    """
    Mean and standard deviation of the target and every covariate, by group.

    Returns:
    pd.DataFrame: columns variable, group, mean, sd (sample sd), n.
    """
    frame = features_frame(matrix)
    rows = []
    for variable in (TARGET,) + tuple(matrix.columns):
        for group, label in ((0, "control"), (1, "treatment")):
            values = frame.loc[frame["group"] == group, variable]
            rows.append(
                {
                    "variable": variable,
                    "group": label,
                    "mean": float(values.mean()) if len(values) else float("nan"),
                    "sd": float(values.std(ddof=1)) if len(values) > 1 else float("nan"),
                    "n": int(len(values)),
                }
            )
    return pd.DataFrame(rows, columns=["variable", "group", "mean", "sd", "n"])


def features_frame(matrix: FeatureMatrix) -> pd.DataFrame:
    frame = pd.DataFrame(matrix.X, columns=list(matrix.columns))
    frame.insert(0, TARGET, matrix.target)
    frame.insert(0, "group", matrix.groups)
    frame.insert(0, "unit_id", matrix.unit_ids)
    return frame


def features_from_frame(frame: pd.DataFrame, scaling_params: Dict[str, Tuple[float, float]] = None) -> FeatureMatrix:
    """
    Builds a FeatureMatrix from a features table. Covariate columns are every column after ``target``.

    The matrix is marked scaled when scaling parameters are given or when every value already lies in [0, 1].
    """
    missing = [c for c in ("unit_id", "group", TARGET) if c not in frame.columns]
    if missing:
        raise InputError(f"features table is missing required columns: {', '.join(missing)}")
    columns = tuple(c for c in frame.columns if c not in ("unit_id", "group", TARGET))
    if not columns:
        raise InputError("features table has no covariate columns")
    matrix = FeatureMatrix(
        unit_ids=frame["unit_id"].astype(str).tolist(),
        groups=frame["group"].to_numpy(dtype=int),
        target=frame[TARGET].to_numpy(dtype=float),
        X=frame[list(columns)].to_numpy(dtype=float),
        columns=columns,
    )
    values = np.column_stack([matrix.X, matrix.target]) if matrix.n_units else np.zeros((0, 1))
    if scaling_params:
        matrix.scaling_params = {k: (float(v[0]), float(v[1])) for k, v in scaling_params.items()}
        matrix.scaled = True
    elif values.size and values.min() >= 0.0 and values.max() <= 1.0:
        matrix.scaled = True
    return matrix


def rejects_frame(rejects: List[Reject]) -> pd.DataFrame:
    return pd.DataFrame([r.as_dict() for r in rejects], columns=["unit_id", "cycle_id", "reason"])
