"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"ADAECKPT"
    version    u32       FORMAT_VERSION
    meta_len   u64       length of the JSON metadata block
    meta       bytes     UTF-8 JSON (config echo, feature pipeline, ...)
    count      u32       number of tensors
    count x:
      name_len u16
      name     bytes     UTF-8
      ndim     u8
      dims     u32 * ndim
      values   f64 * prod(dims), row-major
    crc32      u32       over every preceding byte

Tensors are written in the order given, so saving the same model twice gives
identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ADAECKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint."""


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(meta_bytes)))
    parts.append(meta_bytes)
    parts.append(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to (1,)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("bad magic bytes; not a checkpoint file")
    body, crc = blob[:-4], blob[-4:]
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    if struct.unpack("<I", crc)[0] != zlib.crc32(body):
        raise CorruptCheckpointError("checksum mismatch")
    try:
        pos = len(MAGIC) + 4
        (meta_len,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        meta = json.loads(body[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            values = np.frombuffer(body, dtype="<f8", count=n, offset=pos)
            pos += 8 * n
            tensors[name] = values.reshape(shape).astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"truncated or malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CorruptCheckpointError("trailing bytes after tensor table")
    return tensors, meta


def save(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    Path(path).write_bytes(encode(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
