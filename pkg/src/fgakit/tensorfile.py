"""Binary tensor container ("FGAK" files).

Layout, all integers little-endian::

    magic    4 bytes  b"FGAK"
    version  u32      currently 1
    count    u32      number of tensors
    then per tensor:
      name_len u32, name (UTF-8)
      dtype    u8     0 = float32, 1 = float64
      rank     u32
      dims     rank x u64
      payload  prod(dims) * itemsize bytes, little-endian
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, MissingFileError, VersionError

MAGIC = b"FGAK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not an FGAK tensor file")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise VersionError(version, VERSION)
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"tensor {i} name length")
        try:
            name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor {i}: name is not UTF-8") from exc
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        code, rank = r.unpack("<BI", f"tensor {name!r} dtype/rank")
        if code not in _DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q", f"tensor {name!r} dims")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
        payload = r.take(nbytes, f"tensor {name!r} payload")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such tensor file: {path}")
    return decode(path.read_bytes())
