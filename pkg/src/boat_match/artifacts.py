"""
Module: artifacts

Reading and writing of the files that flow between pipeline stages.

- JSON artifacts are written with ``orjson`` (2-space indent, sorted keys, trailing newline, numpy arrays serialised
  natively). Non-finite floats become ``null``. Every JSON artifact gets a ``schema_version``.
- Run configuration is read from JSON or YAML, chosen by file suffix.
- Tables are written with pandas using round-trip float formatting, so that re-running a stage with the same inputs
  and seed reproduces the files byte for byte.
"""
import math
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import orjson
import pandas as pd
import yaml

from boat_match.errors import InputError
from boat_match.records import SCHEMA_VERSION

PathLike = Union[str, Path]
JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_APPEND_NEWLINE | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY


def _sanitize(value: Any) -> Any:
    """
    Replaces NaN/inf with None recursively and turns tuples and non-float numpy scalars into plain Python values.

    orjson would write non-finite floats as ``null`` anyway, except inside numpy arrays, so arrays are converted to
    lists here whenever they hold a non-finite value.
    """
    if isinstance(value, dict):
        return {str(k): _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    if isinstance(value, np.ndarray):
        if value.dtype.kind == "f" and not np.all(np.isfinite(value)):
            return _sanitize(value.tolist())
        return value
    if isinstance(value, np.generic):
        return _sanitize(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def dumps_json(content: Dict[str, Any]) -> bytes:
    payload = {"schema_version": SCHEMA_VERSION, **content}
    return orjson.dumps(_sanitize(payload), option=JSON_OPTIONS)


def write_json(file_path: PathLike, content: Dict[str, Any]) -> Path:
    """
    Writes a JSON artifact.

    Parameters:
    file_path: destination; parent directories are created.
    content: JSON-serialisable mapping; ``schema_version`` is added.

    Returns:
    Path: the path written.
    """
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with open(file_path, "wb") as fd:
        fd.write(dumps_json(content))
    return file_path


def read_json(file_path: PathLike) -> Dict[str, Any]:
    try:
        with open(file_path, "rb") as fd:
            return orjson.loads(fd.read())
    except FileNotFoundError as exc:
        raise InputError(f"file not found: {file_path}") from exc
    except orjson.JSONDecodeError as exc:
        raise InputError(f"invalid JSON in {file_path}: {exc}") from exc


def read_mapping(file_path: PathLike) -> Dict[str, Any]:
    """
    Reads a configuration mapping from a ``.json``, ``.yaml`` or ``.yml`` file.

    Raises:
    InputError: when the file is missing, unparseable, not a mapping, or has an unknown suffix.
    """
    file_path = Path(file_path)
    suffix = file_path.suffix.lower()
    if suffix == ".json":
        content = read_json(file_path)
    elif suffix in (".yaml", ".yml"):
        try:
            with open(file_path, "r") as fd:
                content = yaml.safe_load(fd)
        except FileNotFoundError as exc:
            raise InputError(f"file not found: {file_path}") from exc
        except yaml.YAMLError as exc:
            raise InputError(f"invalid YAML in {file_path}: {exc}") from exc
    else:
        raise InputError(f"unsupported config format '{suffix}', expected .json, .yaml or .yml")
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise InputError(f"{file_path} must contain a mapping at the top level")
    return content


def write_frame(file_path: PathLike, frame: pd.DataFrame) -> Path:
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(file_path, index=False, float_format="%.17g", lineterminator="\n")
    return file_path


def read_frame(file_path: PathLike, required: tuple = (), **kwargs) -> pd.DataFrame:
    """
    Reads a CSV artifact, checking that every column in ``required`` is present. Floats are parsed round-trip exact.
    """
    kwargs.setdefault("float_precision", "round_trip")
    try:
        frame = pd.read_csv(file_path, **kwargs)
    except FileNotFoundError as exc:
        raise InputError(f"file not found: {file_path}") from exc
    except pd.errors.EmptyDataError as exc:
        raise InputError(f"{file_path} is empty") from exc
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise InputError(f"{file_path} is missing required columns: {', '.join(missing)}")
    return frame
