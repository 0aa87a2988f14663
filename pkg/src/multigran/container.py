"""Checksummed little-endian binary container shared by the file formats.

Layout: 4-byte magic | u16 version | body | u32 crc32(magic..body).
:class:`Reader` turns every short read into a :class:`FormatError`.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import FormatError


def pack(magic: bytes, version: int, body: bytes) -> bytes:
    head = magic + struct.pack("<H", version)
    data = head + body
    return data + struct.pack("<I", zlib.crc32(data))


def unpack(data: bytes, magic: bytes, version: int, path=None) -> "Reader":
    if len(data) < len(magic) + 6:
        raise FormatError("truncated", f"only {len(data)} bytes", path)
    if data[: len(magic)] != magic:
        raise FormatError("magic", f"expected {magic!r}, found {data[:len(magic)]!r}", path)
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise FormatError("checksum", "crc32 mismatch (corrupted or truncated)", path)
    (found,) = struct.unpack_from("<H", data, len(magic))
    if found != version:
        raise FormatError("version", f"unsupported version {found} (expected {version})", path)
    return Reader(data[len(magic) + 2 : -4], path)


class Reader:
    def __init__(self, body: bytes, path=None):
        self.body = body
        self.off = 0
        self.path = path

    def _take(self, n: int) -> bytes:
        if n < 0 or self.off + n > len(self.body):
            raise FormatError("truncated", f"need {n} bytes at offset {self.off}, have {len(self.body) - self.off}", self.path)
        out = self.body[self.off : self.off + n]
        self.off += n
        return out

    def struct(self, fmt: str) -> tuple:
        s = struct.Struct(fmt)
        return s.unpack(self._take(s.size))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        if count < 0 or count > len(self.body):
            raise FormatError("malformed", f"implausible element count {count}", self.path)
        return np.frombuffer(self._take(dt.itemsize * count), dtype=dt).copy()

    def bytes(self, n: int) -> bytes:
        return self._take(n)

    def finish(self) -> None:
        if self.off != len(self.body):
            raise FormatError("malformed", f"{len(self.body) - self.off} unexpected trailing bytes", self.path)


def f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def guarded(fn, path=None):
    """Run a decoder, mapping stray low-level exceptions to ``FormatError``."""
    try:
        return fn()
    except FormatError:
        raise
    except (struct.error, ValueError, TypeError, KeyError, IndexError, OverflowError, MemoryError, UnicodeDecodeError) as exc:
        raise FormatError("malformed", f"{type(exc).__name__}: {exc}", path) from exc
