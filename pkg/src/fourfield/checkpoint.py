"""Versioned binary checkpoint container.

All integers little-endian::

    b"4DGN" | u32 version | u64 step
    u32 n | config text (utf-8, n bytes)
    u32 n | rng state (json, n bytes)
    u32 count | count x tensor
    u32 crc32 of everything above

    tensor: u16 n | name | u8 dtype (0 = f64, 1 = i64) | u8 ndim | ndim x u32 | payload
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"4DGN"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 0, np.dtype("int64"): 1}


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    step: int
    config_text: str
    rng_state: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<IQ", VERSION, ckpt.step)]
    for blob in (ckpt.config_text.encode(), json.dumps(ckpt.rng_state, sort_keys=True).encode()):
        parts += [struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<BB", code, arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint (bad magic)")
    r = _Reader(data)
    r.take(4)
    version, step = r.unpack("<IQ")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, reader supports {VERSION}")
    if len(data) < 8 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise CorruptCheckpointError("checkpoint checksum mismatch (truncated or damaged)")
    try:
        config_text = r.take(r.unpack("<I")[0]).decode()
        rng_state = json.loads(r.take(r.unpack("<I")[0]).decode())
        tensors = {}
        for _ in range(r.unpack("<I")[0]):
            name = r.take(r.unpack("<H")[0]).decode()
            code, ndim = r.unpack("<BB")
            if code not in _DTYPES:
                raise CorruptCheckpointError(f"tensor {name!r} has unknown dtype code {code}")
            shape = r.unpack(f"<{ndim}I")
            dtype = _DTYPES[code]
            count = int(np.prod(shape, dtype=np.int64))
            payload = r.take(count * dtype.itemsize)
            tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(str(exc)) from exc
    if r.pos != len(data) - 4:
        raise CorruptCheckpointError("trailing bytes after tensor table")
    return Checkpoint(step, config_text, rng_state, tensors)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def assign(params: dict, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy stored arrays into live parameters, checking names and shapes."""
    for name, p in params.items():
        key = prefix + name
        if key not in tensors:
            raise ShapeMismatchError(f"checkpoint lacks tensor {key!r}")
        arr = tensors[key]
        if arr.shape != p.shape:
            raise ShapeMismatchError(f"{key}: checkpoint shape {arr.shape}, model shape {p.shape}")
        p.data = np.array(arr, dtype=np.float64)
