"""Binary records for tensors and named-tensor checkpoints.

Tensor record (little-endian)::

    b"SSTN" | u32 version | u32 rank | u64 dims[rank] | f32 payload[prod(dims)]

Checkpoint container::

    b"SSCK" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 count
            | count x (u32 name_len | name (UTF-8) | tensor record)
            | u32 crc32 of every preceding byte
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"SSTN"
TENSOR_VERSION = 1
CKPT_MAGIC = b"SSCK"
CKPT_VERSION = 1


class CorruptRecordError(ValueError):
    """A tensor record or checkpoint is truncated, corrupted or has the wrong magic/version."""


def _read_exact(buf: io.BufferedIOBase, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CorruptRecordError(f"truncated record: wanted {n} bytes, got {len(data)}")
    return data


def write_tensor(buf, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    buf.write(TENSOR_MAGIC)
    buf.write(struct.pack("<II", TENSOR_VERSION, arr.ndim))
    if arr.ndim:
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes(order="C"))


def read_tensor(buf) -> np.ndarray:
    magic = _read_exact(buf, 4)
    if magic != TENSOR_MAGIC:
        raise CorruptRecordError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", _read_exact(buf, 8))
    if version != TENSOR_VERSION:
        raise CorruptRecordError(f"unsupported tensor record version {version}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(buf, 8 * rank)) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(buf, 4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def tensor_to_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    arr = read_tensor(buf)
    if buf.read(1):
        raise CorruptRecordError("trailing bytes after tensor record")
    return arr


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temp file in the same directory, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_to_bytes(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        write_tensor(buf, arr)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_from_bytes(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < 4 or data[:4] != CKPT_MAGIC:
        raise CorruptRecordError(f"bad checkpoint magic {data[:4]!r}")
    if len(data) < 20:
        raise CorruptRecordError("truncated checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    buf = io.BytesIO(body)
    buf.read(4)
    version, meta_len = struct.unpack("<II", _read_exact(buf, 8))
    if version != CKPT_VERSION:
        raise CorruptRecordError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CorruptRecordError("checkpoint checksum mismatch (truncated or corrupted file)")
    meta = json.loads(_read_exact(buf, meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(buf, 4))
        name = _read_exact(buf, name_len).decode("utf-8")
        tensors[name] = read_tensor(buf)
    if buf.read(1):
        raise CorruptRecordError("trailing bytes in checkpoint body")
    return tensors, meta


def save_checkpoint_file(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write(path, checkpoint_to_bytes(tensors, meta))


def load_checkpoint_file(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
