"""
CLI entrypoint

    boat ingest     trips + assignment CSVs -> scaled features
    boat simulate   synthetic study with known ground truth
    boat fit        NUTS and/or VI on the features -> draws + diagnostics
    boat match      propensity scores -> matched pairs
    boat assess     balance and treatment effect of matched pairs
    boat pipeline   all of the above in one output directory

Exit status: 0 success, 1 input or usage error, 2 convergence failure, 3 matching infeasible.
"""
import contextlib
import functools
import sys
from pathlib import Path
from typing import Dict

import click

from boat_match.config import RunConfig, load_run_config
from boat_match.errors import BoatMatchError, InputError
from boat_match.log import log
from boat_match.stages import run_assess, run_fit, run_ingest, run_match, run_pipeline, run_simulate
from boat_match.stages import write_run_metadata


def _report(paths: Dict[str, Path]):
    for name in sorted(paths):
        click.echo(f"{name}: {paths[name]}")


def handle_errors(func):
    """Turns a ``BoatMatchError`` into a one-line message on stderr and the error's exit code."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except BoatMatchError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


@contextlib.contextmanager
def recorded(config: RunConfig, command: str):
    """
    Writes run.json, with the number of warnings the command logged, once the command body finishes. Runs that stop
    on a convergence or matching error still leave their artifacts and get a run.json; input errors do not.
    """
    start = log.warning_count
    try:
        yield
    except BoatMatchError as exc:
        if exc.exit_code != InputError.exit_code:
            write_run_metadata(config.paths.out_dir, command, config, warning_count=log.warning_count - start)
        raise
    write_run_metadata(config.paths.out_dir, command, config, warning_count=log.warning_count - start)


def run_options(func):
    """Options shared by every subcommand."""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON or YAML."),
        click.option("--seed", type=click.IntRange(min=0), default=None, help="Run seed."),
        click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Output directory."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _load(config_path, seed, out_dir, **overrides) -> RunConfig:
    return load_run_config(config_path, seed=seed, **{"paths.out_dir": out_dir}, **overrides)


@click.group()
@click.option("--debug", is_flag=True, help="Log at DEBUG level.")
def cli(debug: bool):
    if debug:
        log.enable_debug()


@cli.command(name="ingest")
@run_options
@click.option("--trips", type=click.Path(dir_okay=False), default=None)
@click.option("--assignment", type=click.Path(dir_okay=False), default=None)
@handle_errors
def cmd_ingest(config_path, seed, out_dir, trips, assignment):
    """Parse, filter, aggregate and scale drive cycles into features.csv."""
    config = _load(config_path, seed, out_dir, **{"paths.trips": trips, "paths.assignment": assignment})
    if config.paths.trips is None or config.paths.assignment is None:
        raise InputError("ingest needs --trips and --assignment (or paths in --config)")
    with recorded(config, "ingest"):
        paths = run_ingest(config.paths.trips, config.paths.assignment, config.paths.out_dir)
    _report(paths)


@cli.command(name="simulate")
@run_options
@click.option("--n-control", type=click.IntRange(min=0), default=None)
@click.option("--n-treated", type=click.IntRange(min=0), default=None)
@click.option("--tau", type=float, default=None, help="True treatment effect in raw target units.")
@handle_errors
def cmd_simulate(config_path, seed, out_dir, n_control, n_treated, tau):
    """Generate a confounded synthetic study with ground truth."""
    config = _load(
        config_path, seed, out_dir, **{"synth.n_control": n_control, "synth.n_treated": n_treated, "synth.tau": tau}
    )
    with recorded(config, "simulate"):
        paths = run_simulate(config, config.paths.out_dir)
    _report(paths)


@cli.command(name="fit")
@run_options
@click.option("--features", type=click.Path(dir_okay=False), default=None)
@click.option("--method", type=click.Choice(["nuts", "vi", "both"]), default=None)
@handle_errors
def cmd_fit(config_path, seed, out_dir, features, method):
    """Sample (and/or variationally fit) the assignment-model posterior."""
    config = _load(config_path, seed, out_dir, method=method, **{"paths.features": features})
    if config.paths.features is None:
        raise InputError("fit needs --features (or paths.features in --config)")
    with recorded(config, "fit"):
        paths = run_fit(config, config.paths.features, config.paths.out_dir)
    _report(paths)


@cli.command(name="match")
@run_options
@click.option("--features", type=click.Path(dir_okay=False), default=None)
@click.option("--draws", type=click.Path(dir_okay=False), default=None)
@click.option("--match", "match_methods", type=click.Choice(["caliper", "nn1", "both"]), default=None)
@click.option("--caliper", type=click.FloatRange(min=0.0, min_open=True), default=None, help="Caliper width.")
@handle_errors
def cmd_match(config_path, seed, out_dir, features, draws, match_methods, caliper):
    """Score units and form matched pairs."""
    config = _load(
        config_path,
        seed,
        out_dir,
        match_methods=match_methods,
        **{"paths.features": features, "paths.draws": draws, "match.width": caliper},
    )
    if config.paths.features is None or config.paths.draws is None:
        raise InputError("match needs --features and --draws (or paths in --config)")
    with recorded(config, "match"):
        paths = run_match(config, config.paths.features, config.paths.draws, config.paths.out_dir)
    _report(paths)


@cli.command(name="assess")
@run_options
@click.option("--features", type=click.Path(dir_okay=False), default=None)
@click.option("--pairs", "pairs_paths", type=click.Path(dir_okay=False), multiple=True)
@click.option("--scores", type=click.Path(dir_okay=False), default=None)
@handle_errors
def cmd_assess(config_path, seed, out_dir, features, pairs_paths, scores):
    """Covariate balance and treatment effect for one or more pair files."""
    config = _load(config_path, seed, out_dir, **{"paths.features": features})
    pairs_paths = list(pairs_paths) or ([config.paths.pairs] if config.paths.pairs is not None else [])
    if config.paths.features is None or not pairs_paths:
        raise InputError("assess needs --features and at least one --pairs (or paths in --config)")
    with recorded(config, "assess"):
        paths = run_assess(config, config.paths.features, pairs_paths, config.paths.out_dir, scores_path=scores)
    _report(paths)


@cli.command(name="pipeline")
@run_options
@click.option("--trips", type=click.Path(dir_okay=False), default=None)
@click.option("--assignment", type=click.Path(dir_okay=False), default=None)
@click.option("--method", type=click.Choice(["nuts", "vi", "both"]), default=None)
@click.option("--match", "match_methods", type=click.Choice(["caliper", "nn1", "both"]), default=None)
@click.option("--caliper", type=click.FloatRange(min=0.0, min_open=True), default=None, help="Caliper width.")
@handle_errors
def cmd_pipeline(config_path, seed, out_dir, trips, assignment, method, match_methods, caliper):
    """ingest (or simulate), fit, match and assess into one directory."""
    config = _load(
        config_path,
        seed,
        out_dir,
        method=method,
        match_methods=match_methods,
        **{"paths.trips": trips, "paths.assignment": assignment, "match.width": caliper},
    )
    with recorded(config, "pipeline"):
        paths = run_pipeline(config, config.paths.out_dir)
    _report(paths)


if __name__ == "__main__":
    cli()
