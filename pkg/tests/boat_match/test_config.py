from pathlib import Path

import numpy as np
import pytest
import yaml

from boat_match import config as config_module
from boat_match.config import RunConfig, context_path, load_run_config, stage_rng, stage_seed, stage_sequence
from boat_match.errors import InputError


def test_defaults():
    config = RunConfig()
    assert config.sampler.n_samples == 3000
    assert config.sampler.n_warmup == 200
    assert config.vi.n_steps == 40000
    assert config.match.width == 0.05
    assert config.methods == ("caliper",)
    assert config.paths.out_dir == Path("out")


def test_run_seed_reaches_every_stage():
    config = RunConfig(seed=17)
    assert config.sampler.seed == config.vi.seed == config.match.seed == config.synth.seed == 17
    assert config.with_overrides(seed=3).sampler.seed == 3


def test_load_yaml(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"seed": 4, "sampler": {"n_samples": 10}, "match_methods": "both"}))
    config = load_run_config(path)
    assert config.seed == 4
    assert config.sampler.n_samples == 10
    assert config.methods == ("caliper", "nn1")


def test_load_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{"method": "vi", "vi": {"n_steps": 12}}')
    config = load_run_config(path)
    assert config.method == "vi"
    assert config.vi.n_steps == 12


@pytest.mark.parametrize(
    "content, message",
    [
        ({"sampler": {"n_sample": 10}}, "unknown keys in config section 'sampler'"),
        ({"colour": "blue"}, "unknown config keys"),
        ({"sampler": {"target_accept": 1.5}}, "invalid sampler configuration"),
        ({"method": "mcmc"}, "invalid run configuration"),
        ({"priors": 3}, "must be a mapping"),
    ],
)
def test_invalid_config(content, message):
    with pytest.raises(InputError, match=message):
        RunConfig.from_mapping(content)


def test_missing_config_file(tmp_path):
    with pytest.raises(InputError, match="file not found"):
        load_run_config(tmp_path / "absent.yaml")


def test_overrides():
    config = load_run_config(None, seed=None, method="both", **{"match.width": 0.1, "paths.features": "f.csv"})
    assert config.method == "both"
    assert config.match.width == 0.1
    assert config.paths.features == Path("f.csv")
    assert config.seed == 0
    with pytest.raises(InputError):
        config.with_overrides(**{"match.width": -1.0})


def test_context_path(monkeypatch, tmp_path):
    monkeypatch.setattr(config_module, "CONTEXT_DIR", str(tmp_path))
    assert context_path("data/trips.csv") == tmp_path / "data" / "trips.csv"
    assert context_path("/abs/trips.csv") == Path("/abs/trips.csv")
    assert context_path(None) is None


def test_stage_streams():
    assert np.array_equal(stage_rng(1, "fit", 0).random(5), stage_rng(1, "fit", 0).random(5))
    assert not np.array_equal(stage_rng(1, "fit", 0).random(5), stage_rng(1, "fit", 1).random(5))
    assert not np.array_equal(stage_rng(1, "fit").random(5), stage_rng(1, "match").random(5))
    assert stage_sequence(2, "score").spawn_key == (3,)
    assert 0 <= stage_seed(9, "vi") < 2**63


def test_as_dict_is_serialisable():
    content = RunConfig().as_dict()
    assert content["paths"]["out_dir"] == "out"
    assert content["sampler"]["n_samples"] == 3000


def test_config_paths_resolve_against_context_once(monkeypatch, tmp_path):
    monkeypatch.setattr(config_module, "CONTEXT_DIR", "ctx")
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"paths": {"trips": "data/trips.csv", "out_dir": "/abs/out"}}))
    config = load_run_config(path, seed=5, **{"paths.assignment": "local/assignment.csv", "match.width": 0.2})
    assert config.paths.trips == Path("ctx/data/trips.csv")
    assert config.paths.out_dir == Path("/abs/out")
    assert config.paths.assignment == Path("local/assignment.csv")
    assert config.with_overrides(seed=6).paths.trips == Path("ctx/data/trips.csv")


def test_flag_paths_are_not_context_resolved(monkeypatch):
    monkeypatch.setattr(config_module, "CONTEXT_DIR", "ctx")
    config = load_run_config(None, **{"paths.out_dir": "runs/a", "paths.features": "f.csv"})
    assert config.paths.out_dir == Path("runs/a")
    assert config.paths.features == Path("f.csv")
    assert RunConfig().paths.out_dir == Path("out")
