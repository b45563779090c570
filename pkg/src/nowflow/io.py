"""FCT1 binary tensor container and JSON manifests.

Layout: ``b"FCT1"``, version byte (1), dtype byte (0=float32, 1=float64),
ndim byte, ``ndim`` little-endian uint64 extents, then row-major
little-endian elements.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FCT1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    """Raised for malformed or unsupported FCT1 payloads."""


def to_bytes(array) -> bytes:
    arr = np.asarray(array)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; only float32/float64")
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise FormatError("bad magic; not an FCT1 container")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported FCT1 version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 7
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(buf) - off != count * dtype.itemsize:
        raise FormatError(f"payload size {len(buf) - off} does not match shape {shape}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path, array) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(array))


def load_tensor(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())


def save_state(directory, state: dict[str, np.ndarray]) -> list[str]:
    """One ``<name>.fct`` per entry; returns the names in order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in state.items():
        save_tensor(directory / f"{name}.fct", arr)
    return list(state)


def load_state(directory, names) -> dict[str, np.ndarray]:
    directory = Path(directory)
    return {name: load_tensor(directory / f"{name}.fct") for name in names}


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, manifest: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")
