"""Little-endian binary helpers with bounds checking and atomic writes."""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import BadMagicError, DimensionOverflowError, FormatError, TruncatedFileError

MAX_ELEMENTS = 1 << 31


class Reader:
    def __init__(self, data: bytes, what: str = "file"):
        self.data = data
        self.pos = 0
        self.what = what

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.what}: truncated (need {n} bytes at offset {self.pos}, "
                f"{self.remaining()} left)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected)) if self.remaining() >= len(expected) else self.data
        if got != expected:
            raise BadMagicError(f"{self.what}: bad magic {got!r}, expected {expected!r}")

    def _unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def u8(self) -> int:
        return self._unpack("<B")

    def u16(self) -> int:
        return self._unpack("<H")

    def u32(self) -> int:
        return self._unpack("<I")

    def u64(self) -> int:
        return self._unpack("<Q")

    def string16(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.what}: invalid UTF-8 string") from exc

    def array(self, dtype: str, count: int) -> np.ndarray:
        if count > MAX_ELEMENTS:
            raise DimensionOverflowError(f"{self.what}: element count {count} exceeds limit")
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize), dtype=dtype).copy()

    def finish(self) -> None:
        if self.remaining():
            raise FormatError(f"{self.what}: {self.remaining()} unexpected trailing bytes")


def check_elements(what: str, *dims: int) -> int:
    total = 1
    for d in dims:
        total *= int(d)
        if total > MAX_ELEMENTS:
            raise DimensionOverflowError(f"{what}: dimensions {dims} overflow the element limit")
    return total


def pack_string16(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"string too long for u16 length prefix: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


def atomic_write(path, payload: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
