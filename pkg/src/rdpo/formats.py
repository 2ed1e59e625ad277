"""Binary container layout shared by datasets, checkpoints and pair files.

Every file is ``MAGIC`` followed by one line of compact, key-sorted JSON
(the header) and then a little-endian payload described by that header.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from pathlib import Path

import numpy as np

F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


def dump_header(header: dict) -> bytes:
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    if "\n" in line:
        raise FormatError("header must fit on one line")
    return line.encode("utf-8") + b"\n"


def read_container(data: bytes, magic: bytes) -> tuple[dict, memoryview]:
    if not data.startswith(magic):
        raise FormatError(f"bad magic, expected {magic!r}")
    end = data.index(b"\n", len(magic))
    header = json.loads(data[len(magic):end].decode("utf-8"))
    return header, memoryview(data)[end + 1:]


def f32_bytes(values) -> bytes:
    return np.ascontiguousarray(values, dtype=F32).tobytes()


def to_f32(values) -> np.ndarray:
    """Round to float32 and return as float64 (exactly representable)."""
    return np.asarray(values, dtype=F32).astype(np.float64)


class Reader:
    """Sequential little-endian reader over a payload."""

    def __init__(self, payload: memoryview):
        self.buf = payload
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def uint(self, nbytes: int) -> int:
        return int.from_bytes(self.take(nbytes), "little")

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype=F32, count=count).astype(np.float64)

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError("trailing bytes after payload")


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    return sha256_bytes(Path(path).read_bytes())


def buffer() -> io.BytesIO:
    return io.BytesIO()
