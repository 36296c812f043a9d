"""Binary tensor blobs and atomic file writes.

Blob layout (all integers little-endian uint32)::

    b"CWDIFF01" | count | count x (name_len | name utf-8 | rank | dims... | float32 payload)

Payloads are little-endian float32 in row-major order.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CWDIFF01"


class ChecksumError(IOError):
    pass


class FormatError(IOError):
    pass


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")  # keeps rank 0, unlike ascontiguousarray
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise FormatError("bad magic; not a tensor blob")
    pos = 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) * 4
        if pos + size > len(blob):
            raise FormatError(f"truncated payload for tensor {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += size
    if pos != len(blob):
        raise FormatError("trailing bytes after last tensor")
    return out


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_blob(path, tensors: Mapping[str, np.ndarray]) -> str:
    data = encode_tensors(tensors)
    atomic_write(path, data)
    return sha256(data)


def read_blob(path, expected_sha: str | None = None) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if expected_sha is not None and sha256(data) != expected_sha:
        raise ChecksumError(f"checksum mismatch for {path}")
    return decode_tensors(data)
