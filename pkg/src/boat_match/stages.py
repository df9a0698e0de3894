"""
Module: stages

One function per pipeline stage. Each reads its inputs from files, writes its artifacts into an output directory and
returns the paths it wrote, so stages can be chained through the filesystem or driven one at a time from the CLI.

Artifacts per stage:

- ingest: features.csv, rejects.csv, scaling.json, describe.csv
- simulate: features.csv, scaling.json, ground_truth.json
- fit: draws.csv, sampler_stats.json, diagnostics.json, trace_rank.csv; with VI also guide.json and vi_loss.csv
- match: scores.csv, draw_scores.csv, pairs.csv, pairs_<method>.csv, unmatched_<method>.csv, match_summary.json
- assess: balance.json, effect.json, table.csv (suffixed ``_<method>`` when several pair files are assessed), and
  propensity.csv when a scores file is available
- every CLI invocation: run.json, the only artifact carrying a timestamp
"""
import contextlib
import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import attrs
import numpy as np

from boat_match import __version__
from boat_match.analysis import balance_as_dict, balance_report, effect_report, table_frame
from boat_match.artifacts import read_frame, read_json, write_frame, write_json
from boat_match.config import RunConfig, stage_rng
from boat_match.diagnostics import diagnose, report_as_dict, trace_frame
from boat_match.errors import ConvergenceError, InputError
from boat_match.ingest import (
    aggregate_units,
    describe_groups,
    exclusions_as_rejects,
    features_frame,
    features_from_frame,
    filter_cycles,
    join_groups,
    minmax_scale,
    parse_cycles,
    read_assignment,
    rejects_frame,
)
from boat_match.log import log
from boat_match.matching import match, match_summary, pairs_frame, pairs_from_frame, unmatched_frame
from boat_match.records import Dataset, FeatureMatrix, PosteriorDraws, param_names
from boat_match.sampler import draws_frame, draws_from_frame, sample_posterior, sampler_stats
from boat_match.scoring import draw_scores_frame, group_stats, propensity_table, score_table, scores_frame
from boat_match.scoring import scores_from_frame
from boat_match.synth import generate_study
from boat_match.vi import fit_vi, guide_as_dict, loss_trace_frame

PathLike = Union[str, Path]
ID_COLUMNS = {"unit_id": str, "treated_id": str, "control_id": str}


@contextlib.contextmanager
def _open_text(path: PathLike):
    """Opens a UTF-8 CSV for reading; a missing file or undecodable bytes read inside the block become InputError."""
    try:
        fd = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError as exc:
        raise InputError(f"file not found: {path}") from exc
    with fd:
        try:
            yield fd
        except UnicodeDecodeError as exc:
            raise InputError(f"{path} is not valid UTF-8 (byte offset {exc.start}): {exc.reason}") from exc


def scaling_as_dict(features: FeatureMatrix) -> Dict[str, object]:
    return {
        "n_units": features.n_units,
        "columns": {name: {"min": low, "max": high} for name, (low, high) in features.scaling_params.items()},
    }


def load_features(path: PathLike) -> FeatureMatrix:
    """
    Reads features.csv. Scaling parameters come from the scaling.json beside it when present; an unscaled table is
    scaled here.
    """
    path = Path(path)
    frame = read_frame(path, required=("unit_id", "group", "target"), dtype={"unit_id": str})
    scaling_path = path.with_name("scaling.json")
    params = None
    if scaling_path.exists():
        params = {k: (v["min"], v["max"]) for k, v in read_json(scaling_path).get("columns", {}).items()}
    features = features_from_frame(frame, scaling_params=params)
    if np.any((features.groups != 0) & (features.groups != 1)):
        raise InputError(f"{path}: group must be 0 or 1 for every unit")
    if not features.scaled:
        log.info(f"{path} is not scaled; applying min-max scaling")
        features = minmax_scale(features)
    return features


def load_draws(path: PathLike) -> PosteriorDraws:
    return draws_from_frame(read_frame(path, required=("chain", "alpha")))


def write_run_metadata(out_dir: PathLike, command: str, config: RunConfig, warning_count: int = 0) -> Path:
    return write_json(
        Path(out_dir, "run.json"),
        {
            "command": command,
            "version": __version__,
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "warning_count": warning_count,
            "config": config.as_dict(),
        },
    )


def run_ingest(trips_path: PathLike, assignment_path: PathLike, out_dir: PathLike) -> Dict[str, Path]:
    """
    Trips and assignment CSVs to the scaled feature matrix.

    Raises:
    InputError: when no drive cycles survive filtering, or fewer than two units remain.
    """
    out_dir = Path(out_dir)
    with _open_text(trips_path) as fd:
        records, rejects = parse_cycles(fd)
    kept, excluded = filter_cycles(records)
    rejects += exclusions_as_rejects(excluded)
    if not kept:
        raise InputError("no cycles after filtering")
    rows, unit_rejects = aggregate_units(kept)
    rejects += unit_rejects
    with _open_text(assignment_path) as fd:
        rows = join_groups(rows, read_assignment(fd))
    if len(rows) < 2:
        raise InputError(f"need at least 2 units with drive cycles and a group assignment, got {len(rows)}")

    features = minmax_scale(FeatureMatrix.from_rows(rows))
    paths = {
        "features": write_frame(out_dir / "features.csv", features_frame(features)),
        "rejects": write_frame(out_dir / "rejects.csv", rejects_frame(rejects)),
        "scaling": write_json(out_dir / "scaling.json", scaling_as_dict(features)),
        "describe": write_frame(out_dir / "describe.csv", describe_groups(features)),
    }
    log.info(f"ingest: {features.n_units} units, {len(rejects)} rejects written to {out_dir}")
    return paths


def run_simulate(config: RunConfig, out_dir: PathLike) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    features, truth = generate_study(config.synth)
    return {
        "features": write_frame(out_dir / "features.csv", features_frame(features)),
        "scaling": write_json(out_dir / "scaling.json", scaling_as_dict(features)),
        "ground_truth": write_json(out_dir / "ground_truth.json", truth.as_dict()),
    }


def _guide_draws(result, n_draws: int, seed: int) -> PosteriorDraws:
    """Independent draws from a fitted guide, standing in for sampler draws when only VI is run."""
    guide = result.guide
    eps = stage_rng(seed, "vi").standard_normal((n_draws, guide.dim))
    return PosteriorDraws(
        draws=guide.mean + eps @ guide.scale_factor.T,
        chain_ids=np.zeros(n_draws, dtype=int),
        names=param_names(guide.dim - 1),
    )


def run_fit(config: RunConfig, features_path: PathLike, out_dir: PathLike) -> Dict[str, Path]:
    """
    Fits the assignment model with NUTS, VI or both, then writes diagnostics.

    With ``method=vi`` the draws file holds ``n_samples`` independent draws from the guide. With ``method=both`` the
    per-coordinate gap between the guide mean and the NUTS posterior mean is added to the diagnostics.

    Raises:
    ConvergenceError: after all artifacts are written, when the diagnostics do not report convergence.
    """
    out_dir = Path(out_dir)
    data = Dataset.from_features(load_features(features_path))
    paths: Dict[str, Path] = {}

    draws = None
    if config.method in ("nuts", "both"):
        draws = sample_posterior(data, config.priors, config.sampler)
        paths["sampler_stats"] = write_json(out_dir / "sampler_stats.json", sampler_stats(draws))

    vi_result = None
    if config.method in ("vi", "both"):
        vi_result = fit_vi(data, config.priors, config.vi)
        paths["guide"] = write_json(out_dir / "guide.json", guide_as_dict(vi_result))
        paths["vi_loss"] = write_frame(out_dir / "vi_loss.csv", loss_trace_frame(vi_result))
        if draws is None:
            draws = _guide_draws(vi_result, config.sampler.n_samples, config.seed)

    paths["draws"] = write_frame(out_dir / "draws.csv", draws_frame(draws))
    report = diagnose(draws)
    content = {"method": config.method, **report_as_dict(report)}
    if draws.unreliable:
        content["unreliable"] = True
    if config.method == "both":
        gap = np.abs(vi_result.guide.mean - draws.draws.mean(axis=0))
        content["vi_nuts_mean_gap"] = dict(zip(draws.names, gap))
        content["vi_nuts_max_gap"] = float(gap.max())
        log.info(f"VI vs NUTS: largest posterior-mean gap {gap.max():.4f}")
    paths["diagnostics"] = write_json(out_dir / "diagnostics.json", content)
    if report.n_draws >= 4:
        paths["trace"] = write_frame(out_dir / "trace_rank.csv", trace_frame(draws, rank_normalized=True))

    if not report.converged:
        raise ConvergenceError(
            f"posterior did not converge (split R-hat threshold {report.threshold}); "
            f"degenerate: {', '.join(report.degenerate) or 'none'}; see {paths['diagnostics']}"
        )
    return paths


def run_match(config: RunConfig, features_path: PathLike, draws_path: PathLike, out_dir: PathLike) -> Dict[str, Path]:
    """
    Scores every unit and matches with each configured method. The first method's pairs are also written as
    pairs.csv.
    """
    out_dir = Path(out_dir)
    features = load_features(features_path)
    draws = load_draws(draws_path)
    scores = score_table(draws, features, k=config.uncertainty_draws, seed=config.seed)
    paths = {"scores": write_frame(out_dir / "scores.csv", scores_frame(scores))}
    if scores.draw_scores is not None:
        paths["draw_scores"] = write_frame(out_dir / "draw_scores.csv", draw_scores_frame(scores))

    summaries = {}
    for i, method in enumerate(config.methods):
        pairs = match(scores, attrs.evolve(config.match, method=method), source=config.score_source)
        frame = pairs_frame(pairs)
        paths[f"pairs_{method}"] = write_frame(out_dir / f"pairs_{method}.csv", frame)
        paths[f"unmatched_{method}"] = write_frame(out_dir / f"unmatched_{method}.csv", unmatched_frame(pairs))
        if i == 0:
            paths["pairs"] = write_frame(out_dir / "pairs.csv", frame)
        summaries[method] = match_summary(pairs, scores, source=config.score_source)
        log.info(f"{method}: {len(pairs)} pairs, match rate {summaries[method]['match_rate']:.3f}")

    paths["match_summary"] = write_json(
        out_dir / "match_summary.json",
        {
            "primary": config.methods[0],
            "caliper_width": config.match.width,
            "order": config.match.order,
            "scores": group_stats(scores),
            "methods": summaries,
        },
    )
    return paths


def _method_from_path(path: Path, default: str) -> str:
    stem = path.stem
    return stem.split("_", 1)[1] if stem.startswith("pairs_") else default


def run_assess(
    config: RunConfig,
    features_path: PathLike,
    pairs_paths: Sequence[PathLike],
    out_dir: PathLike,
    scores_path: Optional[PathLike] = None,
) -> Dict[str, Path]:
    """
    Balance and effect reports for one or more pair files.
    """
    if not pairs_paths:
        raise InputError("assess needs at least one pairs file")
    out_dir = Path(out_dir)
    features = load_features(features_path)
    scores = None
    if scores_path is not None and Path(scores_path).exists():
        scores = scores_from_frame(read_frame(scores_path, dtype=ID_COLUMNS))

    paths: Dict[str, Path] = {}
    suffixes: List[str] = []
    for pairs_path in pairs_paths:
        method = _method_from_path(Path(pairs_path), config.match.method)
        pairs = pairs_from_frame(read_frame(pairs_path, dtype=ID_COLUMNS), method=method)
        suffix = "" if len(pairs_paths) == 1 else f"_{method}"
        if suffix in suffixes:
            raise InputError(f"two pair files resolve to the same method '{method}'")
        suffixes.append(suffix)

        balance = balance_report(features, pairs)
        effect = effect_report(features, pairs)
        paths[f"balance{suffix}"] = write_json(
            out_dir / f"balance{suffix}.json", {"method": method, "n_pairs": len(pairs), **balance_as_dict(balance)}
        )
        paths[f"effect{suffix}"] = write_json(out_dir / f"effect{suffix}.json", {"method": method, **effect.as_dict()})
        paths[f"table{suffix}"] = write_frame(out_dir / f"table{suffix}.csv", table_frame(features, pairs))
        if scores is not None:
            paths[f"propensity{suffix}"] = write_frame(
                out_dir / f"propensity{suffix}.csv", propensity_table(scores, pairs, source=config.score_source)
            )
        matched = "n/a" if effect.ate_matched is None else f"{effect.ate_matched:.4f}"
        log.info(f"{method}: naive ATE {effect.ate_naive:.4f}, matched ATE {matched}")
    return paths


def run_pipeline(config: RunConfig, out_dir: PathLike) -> Dict[str, Path]:
    """
    ingest (or simulate when no trips file is configured), fit, match, assess.
    """
    out_dir = Path(out_dir)
    paths: Dict[str, Path] = {}
    if config.paths.trips is not None:
        if config.paths.assignment is None:
            raise InputError("pipeline with a trips file also needs an assignment file")
        paths.update(run_ingest(config.paths.trips, config.paths.assignment, out_dir))
    else:
        paths.update(run_simulate(config, out_dir))
    paths.update(run_fit(config, paths["features"], out_dir))
    paths.update(run_match(config, paths["features"], paths["draws"], out_dir))
    pair_files = [paths[f"pairs_{m}"] for m in config.methods] if len(config.methods) > 1 else [paths["pairs"]]
    paths.update(run_assess(config, paths["features"], pair_files, out_dir, scores_path=paths["scores"]))
    return paths
