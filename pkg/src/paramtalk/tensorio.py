"""On-disk formats.

Binary tensor container (``.pdt``), little-endian throughout::

    b"PDT1" | u8 dtype (0=f32, 1=f64) | u8 rank | u64 dims[rank] | row-major payload

``.csv`` files are accepted as a fallback for 2-D matrices. Partitions,
configs and stats are plain JSON.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PDT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    """A file could not be decoded; the message names the offending path."""


def write_tensor(path, arr, dtype="f64") -> None:
    path = Path(path)
    if path.suffix == ".csv":
        write_csv(path, arr)
        return
    a = np.asarray(arr, dtype=np.float64 if dtype == "f64" else np.float32)
    code = _CODES[a.dtype]
    header = MAGIC + struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        return read_csv(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a PDT1 tensor")
    code, rank = struct.unpack_from("<BB", raw, 4)
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    off = 6 + 8 * rank
    if len(raw) < off:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", raw, 6)
    dt = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(raw) - off != expected:
        raise FormatError(f"{path}: payload is {len(raw) - off} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=dt, offset=off).reshape(shape).astype(np.float64)


def write_csv(path, arr) -> None:
    a = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, a, delimiter=",", fmt="%.17g")


def read_csv(path) -> np.ndarray:
    try:
        return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2))
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot parse CSV ({exc})") from exc


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot load JSON ({exc})") from exc


def list_tensors(directory) -> list[Path]:
    """Tensor files in ``directory`` sorted by name (``.pdt`` preferred over ``.csv``)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"{directory}: not a directory")
    found: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.suffix in (".pdt", ".csv") and (p.stem not in found or p.suffix == ".pdt"):
            found[p.stem] = p
    return [found[k] for k in sorted(found)]
