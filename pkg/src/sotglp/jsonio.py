"""Shape-tagged array records and strict JSON file helpers."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError


def pack_array(arr) -> dict:
    arr = np.asarray(arr)
    if arr.dtype == bool:
        return {"shape": list(arr.shape), "dtype": "bool", "data": arr.ravel().tolist()}
    if np.issubdtype(arr.dtype, np.integer):
        return {"shape": list(arr.shape), "dtype": "int", "data": arr.ravel().tolist()}
    return {"shape": list(arr.shape), "data": np.asarray(arr, dtype=np.float64).ravel().tolist()}


def unpack_array(obj, name: str = "array") -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        dtype = {"bool": bool, "int": np.int64}.get(obj.get("dtype"), np.float64)
        data = np.asarray(obj["data"], dtype=dtype)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{name}: expected a {{shape, data}} array record") from exc
    if data.ndim != 1 or data.size != int(np.prod(shape, dtype=np.int64)):
        raise FormatError(f"{name}: {data.size} values do not fill shape {shape}")
    return data.reshape(shape)


def dumps(obj) -> str:
    # json emits shortest round-trip float reprs, so float64 survives exactly
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path, kind: str | None = None, version: int | None = None) -> dict:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise FormatError(f"{path}: top-level value must be an object")
    if kind is not None and obj.get("kind") != kind:
        raise FormatError(f"{path}: expected kind {kind!r}, found {obj.get('kind')!r}")
    if version is not None and obj.get("format_version") != version:
        raise VersionError(f"{path}: format_version {obj.get('format_version')!r}, expected {version}")
    return obj
