"""
Covariate balance and treatment effects.

Sign convention: effects are treated minus control, so a treatment that lowers the target has a negative effect.
All standardised differences use the pre-match pooled sd, so the before and after values share a denominator.
"""
import math
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from boat_match.errors import InputError
from boat_match.log import log
from boat_match.records import CONTROL, TARGET, TREATMENT, BalanceReport, EffectReport, FeatureMatrix, MatchedPairs


def _pooled_sd(X: np.ndarray, groups: np.ndarray) -> np.ndarray:
    treated, control = X[groups == TREATMENT], X[groups == CONTROL]
    if treated.shape[0] < 2 or control.shape[0] < 2:
        raise InputError("standardised differences need at least two units in each group")
    return np.sqrt((treated.var(axis=0, ddof=1) + control.var(axis=0, ddof=1)) / 2.0)


def asmd(
    X: np.ndarray, group_labels: np.ndarray, subset: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Absolute standardised mean difference per covariate.

    Parameters:
    X (np.ndarray): N x I covariates.
    group_labels (np.ndarray): 0/1 per unit.
    subset (np.ndarray): optional unit indices (the matched units) over which the means are taken.

    Returns:
    (asmd, degenerate): ASMD per covariate (NaN where the pooled sd is 0) and the degenerate mask.
    """
    X = np.asarray(X, dtype=float).reshape(len(group_labels), -1)
    groups = np.asarray(group_labels, dtype=int)
    sd = _pooled_sd(X, groups)
    degenerate = sd <= 0
    if subset is not None:
        X, groups = X[subset], groups[subset]
    treated, control = X[groups == TREATMENT], X[groups == CONTROL]
    if treated.shape[0] == 0 or control.shape[0] == 0:
        raise InputError("both groups must be present in the evaluated units")
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.abs(treated.mean(axis=0) - control.mean(axis=0)) / np.where(degenerate, 1.0, sd)
    return np.where(degenerate, np.nan, values), degenerate


def variance_reduction(
    X: np.ndarray, group_labels: np.ndarray, matched_controls: np.ndarray
) -> Tuple[np.ndarray, float]:
    """
    Percent reduction of each covariate's control-group variance when restricting to the matched controls.

    Returns:
    (per-covariate percent, average over non-degenerate covariates). Negative values mean the matched controls are
    more spread out than the full control group.
    """
    X = np.asarray(X, dtype=float).reshape(len(group_labels), -1)
    control = X[np.asarray(group_labels) == CONTROL]
    matched = X[np.asarray(matched_controls, dtype=int)]
    if matched.shape[0] == 0:
        raise InputError("variance reduction needs at least one matched pair")
    var_all = control.var(axis=0, ddof=1)
    var_matched = matched.var(axis=0, ddof=1) if matched.shape[0] > 1 else np.full(X.shape[1], np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        reduction = np.where(var_all > 0, 100.0 * (var_all - var_matched) / np.where(var_all > 0, var_all, 1.0), np.nan)
    valid = reduction[np.isfinite(reduction)]
    return reduction, float(valid.mean()) if valid.size else float("nan")


def ate_naive(targets: np.ndarray, group_labels: np.ndarray) -> float:
    """Mean target of all treated units minus mean target of all control units."""
    targets = np.asarray(targets, dtype=float)
    groups = np.asarray(group_labels, dtype=int)
    treated, control = targets[groups == TREATMENT], targets[groups == CONTROL]
    if treated.size == 0 or control.size == 0:
        raise InputError("naive effect needs both groups")
    return math.fsum(treated) / treated.size - math.fsum(control) / control.size


def ate_matched(targets: Mapping[str, float], pairs: MatchedPairs) -> float:
    """
    Mean over pairs of treated target minus matched-control target.

    Raises:
    InputError: when there are no pairs.
    """
    if len(pairs) == 0:
        raise InputError("matched effect is undefined without pairs")
    differences = [targets[p.treated_id] - targets[p.control_id] for p in pairs.pairs]
    return math.fsum(differences) / len(differences)


def _matched_indices(features: FeatureMatrix, pairs: MatchedPairs) -> Tuple[np.ndarray, np.ndarray]:
    index = features.index_of()
    try:
        treated = np.array([index[u] for u in pairs.treated_ids], dtype=int)
        control = np.array([index[u] for u in pairs.control_ids], dtype=int)
    except KeyError as exc:
        raise InputError(f"pair references unit {exc} which is not in the features") from exc
    return treated, control


def _group_moments(values: np.ndarray, groups: np.ndarray, group: int) -> Tuple[np.ndarray, np.ndarray]:
    selected = values[groups == group]
    if selected.shape[0] == 0:
        nan = np.full(values.shape[1], np.nan)
        return nan, nan
    sd = selected.std(axis=0, ddof=1) if selected.shape[0] > 1 else np.zeros(values.shape[1])
    return selected.mean(axis=0), sd


def _correlation(X: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Pearson correlation of each column of X with v; NaN for constant columns."""
    Xc = X - X.mean(axis=0)
    vc = v - v.mean()
    denominator = np.sqrt((Xc**2).sum(axis=0) * (vc**2).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denominator > 0, Xc.T @ vc / np.where(denominator > 0, denominator, 1.0), np.nan)


def balance_report(features: FeatureMatrix, pairs: MatchedPairs) -> BalanceReport:
    """
    Balance of every covariate before matching (all units) and after (matched units only).
    """
    X, groups = features.X, features.groups
    treated_idx, control_idx = _matched_indices(features, pairs)
    subset = np.concatenate([treated_idx, control_idx])

    before, degenerate = asmd(X, groups)
    if len(pairs):
        after, _ = asmd(X, groups, subset=subset)
        reduction, avg_reduction = variance_reduction(X, groups, control_idx)
        var_after = X[control_idx].var(axis=0, ddof=1) if control_idx.size > 1 else np.full(X.shape[1], np.nan)
    else:
        log.warning("no matched pairs; after-matching balance is undefined")
        after = reduction = var_after = np.full(X.shape[1], np.nan)
        avg_reduction = float("nan")

    mean_before, sd_before, mean_after, sd_after = {}, {}, {}, {}
    for label, group in (("control", CONTROL), ("treated", TREATMENT)):
        mean_before[label], sd_before[label] = _group_moments(X, groups, group)
        mean_after[label], sd_after[label] = _group_moments(X[subset], groups[subset], group)

    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_before = sd_before["treated"] ** 2 / sd_before["control"] ** 2
        ratio_after = sd_after["treated"] ** 2 / sd_after["control"] ** 2

    columns = list(features.columns)
    return BalanceReport(
        columns=columns,
        asmd_before=before,
        asmd_after=after,
        var_control_before=X[groups == CONTROL].var(axis=0, ddof=1),
        var_control_after=var_after,
        variance_reduction=reduction,
        avg_variance_reduction=avg_reduction,
        mean_before=mean_before,
        mean_after=mean_after,
        sd_before=sd_before,
        sd_after=sd_after,
        variance_ratio_before=np.where(np.isfinite(ratio_before), ratio_before, np.nan),
        variance_ratio_after=np.where(np.isfinite(ratio_after), ratio_after, np.nan),
        corr_target=_correlation(X, features.target),
        corr_treatment=_correlation(X, groups.astype(float)),
        degenerate=[c for c, flag in zip(columns, degenerate) if flag],
    )


def effect_report(features: FeatureMatrix, pairs: MatchedPairs) -> EffectReport:
    targets, groups = features.target, features.groups
    by_id = dict(zip(features.unit_ids, targets))
    treated_idx, control_idx = _matched_indices(features, pairs)
    matched = len(pairs) > 0
    return EffectReport(
        ate_naive=ate_naive(targets, groups),
        ate_matched=ate_matched(by_id, pairs) if matched else None,
        target_mean_control_before=float(targets[groups == CONTROL].mean()),
        target_mean_treated_before=float(targets[groups == TREATMENT].mean()),
        target_mean_control_after=float(targets[control_idx].mean()) if matched else None,
        target_mean_treated_after=float(targets[treated_idx].mean()) if matched else None,
        n_pairs=len(pairs),
    )


def balance_as_dict(report: BalanceReport) -> Dict[str, object]:
    per_covariate = {}
    for i, column in enumerate(report.columns):
        per_covariate[column] = {
            "asmd_before": report.asmd_before[i],
            "asmd_after": report.asmd_after[i],
            "var_control_before": report.var_control_before[i],
            "var_control_after": report.var_control_after[i],
            "variance_reduction_pct": report.variance_reduction[i],
            "variance_ratio_before": report.variance_ratio_before[i],
            "variance_ratio_after": report.variance_ratio_after[i],
            "corr_target": report.corr_target[i],
            "corr_treatment": report.corr_treatment[i],
            "mean_before": {g: report.mean_before[g][i] for g in report.mean_before},
            "mean_after": {g: report.mean_after[g][i] for g in report.mean_after},
            "sd_before": {g: report.sd_before[g][i] for g in report.sd_before},
            "sd_after": {g: report.sd_after[g][i] for g in report.sd_after},
        }
    return {
        "avg_asmd_before": report.avg_asmd_before,
        "avg_asmd_after": report.avg_asmd_after,
        "avg_variance_reduction_pct": report.avg_variance_reduction,
        "degenerate": report.degenerate,
        "covariates": per_covariate,
    }


def table_frame(features: FeatureMatrix, pairs: MatchedPairs) -> pd.DataFrame:
    """
    Long table ``variable,group,stage,mean,sd,n`` for the target and every covariate, before and after matching.
    """
    treated_idx, control_idx = _matched_indices(features, pairs)
    values = np.column_stack([features.target, features.X])
    names: List[str] = [TARGET, *features.columns]
    subsets = {
        ("control", "before"): np.flatnonzero(features.groups == CONTROL),
        ("treated", "before"): np.flatnonzero(features.groups == TREATMENT),
        ("control", "after"): control_idx,
        ("treated", "after"): treated_idx,
    }
    records = []
    for j, name in enumerate(names):
        for (group, stage), idx in subsets.items():
            column = values[idx, j]
            records.append(
                {
                    "variable": name,
                    "group": group,
                    "stage": stage,
                    "mean": float(column.mean()) if column.size else float("nan"),
                    "sd": float(column.std(ddof=1)) if column.size > 1 else float("nan"),
                    "n": int(column.size),
                }
            )
    return pd.DataFrame.from_records(records, columns=["variable", "group", "stage", "mean", "sd", "n"])
