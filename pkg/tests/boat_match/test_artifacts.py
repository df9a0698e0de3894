import numpy as np
import orjson
import pandas as pd
import pytest

from boat_match.artifacts import dumps_json, read_frame, read_json, read_mapping, write_frame, write_json
from boat_match.errors import InputError
from boat_match.log import LogWrapper, logger


def test_json_is_sorted_and_null_safe(tmp_path):
    path = write_json(tmp_path / "nested" / "out.json", {"b": float("nan"), "a": np.array([1.0, np.inf])})
    text = path.read_text()
    assert text.endswith("\n")
    assert text.index('"a"') < text.index('"b"') < text.index('"schema_version"')
    content = read_json(path)
    assert content == {"a": [1.0, None], "b": None, "schema_version": 1}


def test_json_is_byte_stable():
    content = {"x": np.arange(3.0), "y": {"z": (1, 2)}}
    assert dumps_json(content) == dumps_json(dict(reversed(list(content.items()))))
    assert orjson.loads(dumps_json(content))["y"]["z"] == [1, 2]


def test_read_mapping(tmp_path):
    (tmp_path / "empty.yaml").write_text("")
    assert read_mapping(tmp_path / "empty.yaml") == {}
    (tmp_path / "list.yml").write_text("- 1\n- 2\n")
    with pytest.raises(InputError, match="mapping"):
        read_mapping(tmp_path / "list.yml")
    with pytest.raises(InputError, match="unsupported config format"):
        read_mapping(tmp_path / "run.toml")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(InputError, match="invalid JSON"):
        read_mapping(tmp_path / "bad.json")


def test_frame_round_trip_precision(tmp_path):
    frame = pd.DataFrame({"unit_id": ["a", "b"], "value": [0.1 + 0.2, 1 / 3]})
    path = write_frame(tmp_path / "t.csv", frame)
    restored = read_frame(path, required=("unit_id", "value"))
    assert restored["value"].tolist() == frame["value"].tolist()
    with pytest.raises(InputError, match="missing required columns: group"):
        read_frame(path, required=("unit_id", "group"))


def test_read_frame_missing_and_empty(tmp_path):
    with pytest.raises(InputError, match="file not found"):
        read_frame(tmp_path / "absent.csv")
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(InputError, match="is empty"):
        read_frame(tmp_path / "empty.csv")


def test_log_wrapper_stamps_caller(caplog):
    wrapper = LogWrapper(logger)
    wrapper.warning("something odd")
    assert wrapper.warning_count == 1
    assert "[test_artifacts.py:" in caplog.text
    assert "test_log_wrapper_stamps_caller] something odd" in caplog.text
