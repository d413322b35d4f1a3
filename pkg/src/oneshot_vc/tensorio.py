"""Single-tensor binary container used for feature files.

Layout::

    16 bytes   magic
     4 bytes   header length (uint32, little-endian)
     n bytes   JSON header: shape, dtype, name, frame_shift
     payload   raw float32 little-endian values, C order
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"OSVC-TENSOR\x00\x00\x00\x01\n"
assert len(MAGIC) == 16

DTYPE = "<f4"


class TensorFormatError(ValueError):
    """Raised when a container file is malformed."""


@dataclass
class TensorFile:
    values: np.ndarray
    name: str
    frame_shift: float = 0.0125
    extra: dict = field(default_factory=dict)


def write_tensor(path: str | os.PathLike, values: np.ndarray, name: str,
                 frame_shift: float = 0.0125, **extra) -> Path:
    path = Path(path)
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    header = {
        "shape": list(arr.shape),
        "dtype": "float32-le",
        "name": name,
        "frame_shift": frame_shift,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(arr.tobytes())
    os.replace(tmp, path)
    return path


def read_tensor(path: str | os.PathLike) -> TensorFile:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:16] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", data[16:20])
    try:
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
        name = str(header["name"])
        frame_shift = float(header["frame_shift"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise TensorFormatError(f"{path}: malformed header ({exc})") from exc
    if header.get("dtype") != "float32-le":
        raise TensorFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    payload = data[20 + hlen:]
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(payload) != expected:
        raise TensorFormatError(
            f"{path}: payload has {len(payload)} bytes, header shape {list(shape)} needs {expected}")
    values = np.frombuffer(payload, dtype=DTYPE).reshape(shape).astype(np.float32)
    return TensorFile(values, name, frame_shift, header.get("extra", {}))


def read_header(path: str | os.PathLike) -> dict:
    """Parse only the JSON header (cheap freshness checks)."""
    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) < 20 or head[:16] != MAGIC:
            raise TensorFormatError(f"{path}: bad magic")
        (hlen,) = struct.unpack("<I", head[16:20])
        blob = fh.read(hlen)
    try:
        return json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"{path}: malformed header ({exc})") from exc
