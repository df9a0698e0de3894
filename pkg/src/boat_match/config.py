"""
Run configuration, path resolution and seed derivation.

A run is configured from one JSON or YAML file whose top level mirrors ``RunConfig``; CLI flags are applied on top.
Relative paths inside the config file resolve against ``BOAT_CONTEXT_DIR`` when it is set, so the same config file
works from a checkout and from a mounted context directory. Paths on the command line, ``--config`` included, are
relative to the working directory.
"""
from os import getenv
from pathlib import Path
from typing import Any, Dict, Optional, Union

import attrs
import numpy as np
from attrs import define, field, validators

from boat_match.artifacts import read_mapping
from boat_match.errors import InputError
from boat_match.records import Base, MatchConfig, Priors, SamplerConfig, SynthConfig, VIConfig

CONTEXT_DIR = getenv("BOAT_CONTEXT_DIR", None)
STAGES = {"simulate": 0, "fit": 1, "vi": 2, "score": 3, "match": 4}


def optional_path(path: Union[str, Path, None]) -> Optional[Path]:
    return None if path is None else Path(path).expanduser()


def context_path(path: Union[str, Path, None]) -> Optional[Path]:
    """
    Resolves a relative path against the context directory.

    Parameters:
    path (str | Path | None): a path read from a config file.

    Returns:
    Path: unchanged if absolute or if ``BOAT_CONTEXT_DIR`` is unset; otherwise joined onto the context directory.
    None passes through.
    """
    if path is None:
        return None
    path = optional_path(path)
    if path.is_absolute() or CONTEXT_DIR is None:
        return path
    return Path(CONTEXT_DIR, path)


def stage_sequence(seed: int, stage: str, *extra: int) -> np.random.SeedSequence:
    """
    The seed sequence for one pipeline stage (and optionally a sub-stream such as a chain index). Stages draw from
    disjoint streams so adding draws to one stage never shifts another.
    """
    return np.random.SeedSequence(seed, spawn_key=(STAGES[stage], *extra))


def stage_rng(seed: int, stage: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(stage_sequence(seed, stage, *extra))


def stage_seed(seed: int, stage: str) -> int:
    """A 63-bit integer seed for libraries that take a plain integer (torch)."""
    return int(stage_sequence(seed, stage).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@define
class RunPaths(Base):
    trips: Optional[Path] = field(default=None, converter=optional_path)
    assignment: Optional[Path] = field(default=None, converter=optional_path)
    features: Optional[Path] = field(default=None, converter=optional_path)
    draws: Optional[Path] = field(default=None, converter=optional_path)
    pairs: Optional[Path] = field(default=None, converter=optional_path)
    out_dir: Path = field(default=Path("out"), converter=optional_path)


_SECTIONS = {
    "paths": RunPaths,
    "priors": Priors,
    "sampler": SamplerConfig,
    "vi": VIConfig,
    "match": MatchConfig,
    "synth": SynthConfig,
}


@define
class RunConfig(Base):
    """
    Everything one CLI invocation needs. ``seed`` is the run seed; stage configs receive it on construction so a
    single number reproduces the whole run.
    """

    paths: RunPaths = field(factory=RunPaths)
    priors: Priors = field(factory=Priors)
    sampler: SamplerConfig = field(factory=SamplerConfig)
    vi: VIConfig = field(factory=VIConfig)
    match: MatchConfig = field(factory=MatchConfig)
    synth: SynthConfig = field(factory=SynthConfig)
    seed: int = field(default=0, validator=validators.ge(0))
    method: str = field(default="nuts", validator=validators.in_(("nuts", "vi", "both")))
    match_methods: str = field(default="caliper", validator=validators.in_(("caliper", "nn1", "both")))
    score_source: str = field(default="point", validator=validators.in_(("point", "draw_mean")))
    uncertainty_draws: int = field(default=25, validator=validators.ge(0))

    def __attrs_post_init__(self):
        self.sampler = attrs.evolve(self.sampler, seed=self.seed)
        self.vi = attrs.evolve(self.vi, seed=self.seed)
        self.match = attrs.evolve(self.match, seed=self.seed)
        self.synth = attrs.evolve(self.synth, seed=self.seed)

    @property
    def methods(self):
        return ("caliper", "nn1") if self.match_methods == "both" else (self.match_methods,)

    def as_dict(self) -> Dict[str, Any]:
        return attrs.asdict(self, value_serializer=lambda _inst, _field, v: str(v) if isinstance(v, Path) else v)

    @classmethod
    def from_mapping(cls, content: Dict[str, Any]) -> "RunConfig":
        """
        Builds a run configuration from a nested mapping.

        Raises:
        InputError: on unknown keys or invalid values.
        """
        unknown = set(content) - set(cls.fields())
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values = {}
        for key, value in content.items():
            section = _SECTIONS.get(key)
            if section is None:
                values[key] = value
                continue
            if not isinstance(value, dict):
                raise InputError(f"config section '{key}' must be a mapping")
            unknown = set(value) - set(section.fields())
            if unknown:
                raise InputError(f"unknown keys in config section '{key}': {', '.join(sorted(unknown))}")
            if section is RunPaths:
                value = {name: context_path(path) for name, path in value.items()}
            values[key] = _build(section, value, key)
        return _build(cls, values, "run")

    def with_overrides(self, **overrides) -> "RunConfig":
        """
        Applies CLI flags. ``None`` values mean the flag was not given. Keys of the form ``section.name`` reach into a
        section (``match.width``, ``paths.out_dir``). Paths given here are taken as they are, relative to the working
        directory.
        """
        top: Dict[str, Any] = {}
        sections: Dict[str, Dict[str, Any]] = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if "." in key:
                section, name = key.split(".", 1)
                sections.setdefault(section, {})[name] = value
            else:
                top[key] = value
        for section, values in sections.items():
            current = getattr(self, section)
            top[section] = _build(lambda **kw: attrs.evolve(current, **kw), values, section)
        return _build(lambda **kw: attrs.evolve(self, **kw), top, "run")


def _build(factory, values: Dict[str, Any], where: str):
    try:
        return factory(**values)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid {where} configuration: {exc}") from exc


def load_run_config(config_path: Union[str, Path, None] = None, **overrides) -> RunConfig:
    """
    Loads the run configuration.

    Parameters:
    config_path: JSON or YAML file; defaults apply when None.
    overrides: CLI flag values, see ``RunConfig.with_overrides``.

    Returns:
    RunConfig: the resolved configuration.
    """
    content = read_mapping(Path(config_path)) if config_path is not None else {}
    return RunConfig.from_mapping(content).with_overrides(**overrides)
