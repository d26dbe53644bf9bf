"""SFT1 tensor files: 8-byte magic, one JSON header line, raw little-endian f64."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"SACTFT1\x00"


class SFTFormatError(ValueError):
    """File is not a well-formed SFT1 tensor."""


def dumps(values) -> bytes:
    arr = np.ascontiguousarray(values.data if isinstance(values, Tensor) else values, dtype="<f8")
    header = json.dumps({"shape": list(arr.shape), "dtype": "f64"}, separators=(",", ":"))
    return MAGIC + header.encode("utf-8") + b"\n" + arr.tobytes()


def loads(blob: bytes) -> np.ndarray:
    if blob[:8] != MAGIC:
        raise SFTFormatError("bad magic")
    end = blob.find(b"\n", 8)
    if end < 0:
        raise SFTFormatError("header line is not terminated")
    try:
        header = json.loads(blob[8:end].decode("utf-8"))
        shape = [int(n) for n in header["shape"]]
        dtype = header["dtype"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SFTFormatError(f"malformed header: {exc}") from exc
    if dtype != "f64":
        raise SFTFormatError(f"unsupported dtype {dtype!r}")
    if any(n <= 0 for n in shape):
        raise SFTFormatError(f"non-positive extent in shape {shape}")
    payload = blob[end + 1:]
    count = int(np.prod(shape)) if shape else 1
    if len(payload) != 8 * count:
        raise SFTFormatError(f"payload has {len(payload)} bytes, shape {shape} needs {8 * count}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save(path: str | Path, values) -> None:
    Path(path).write_bytes(dumps(values))


def load(path: str | Path) -> np.ndarray:
    return loads(Path(path).read_bytes())
