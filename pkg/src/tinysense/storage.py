"""Binary file formats: datasets (.tsds), model bundles (.tsmd), codebooks (.tscb).

Every file is  magic(4) | u16 version | body | u32 crc32(magic..body),
all integers little-endian.  Array payloads are raw row-major little-endian
floats: float32 for measurement data (datasets, codebook files), float64 for
model parameters so that a save/load cycle is bit-exact.  Layouts are
documented byte-for-byte in docs/FORMATS.md.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np


class FormatError(Exception):
    """Base class for persistence failures."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class CrcError(FormatError):
    pass


MAGIC_DATASET = b"TSDS"
MAGIC_MODEL = b"TSMD"
MAGIC_CODEBOOK = b"TSCB"
MAGIC_INDEXES = b"TSVQ"

DATASET_VERSION = 1
MODEL_VERSION = 1
CODEBOOK_VERSION = 1
INDEXES_VERSION = 1

_DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "<i4"}
_DTYPE_BY_STR = {v: k for k, v in _DTYPE_CODES.items()}


class Writer:
    """Accumulates a file body; finish() prepends nothing and appends the CRC."""

    def __init__(self, magic: bytes, version: int):
        self._buf = bytearray(magic)
        self._buf += struct.pack("<H", version)

    def u8(self, v: int):
        self._buf += struct.pack("<B", v)

    def u16(self, v: int):
        self._buf += struct.pack("<H", v)

    def u32(self, v: int):
        self._buf += struct.pack("<I", v)

    def f32(self, v: float):
        self._buf += struct.pack("<f", v)

    def f64(self, v: float):
        self._buf += struct.pack("<d", v)

    def raw(self, b: bytes):
        self._buf += b

    def text(self, s: str):
        enc = s.encode("utf-8")
        self.u16(len(enc))
        self.raw(enc)

    def array(self, a: np.ndarray):
        """dtype code u8 | ndim u8 | u32 dims | raw little-endian payload."""
        dt = np.dtype(a.dtype).newbyteorder("<").str
        if dt not in _DTYPE_BY_STR:
            raise ValueError(f"unsupported array dtype {a.dtype}")
        self.u8(_DTYPE_BY_STR[dt])
        self.u8(a.ndim)
        for d in a.shape:
            self.u32(d)
        self.raw(np.ascontiguousarray(a, dtype=dt).tobytes())

    def finish(self) -> bytes:
        return bytes(self._buf) + struct.pack("<I", zlib.crc32(self._buf) & 0xFFFFFFFF)


class Reader:
    """Cursor over a verified file body."""

    def __init__(self, blob: bytes, magic: bytes, version: int):
        if len(blob) < 10:
            raise TruncatedError(f"file too short ({len(blob)} bytes)")
        body, crc_bytes = blob[:-4], blob[-4:]
        (crc_stored,) = struct.unpack("<I", crc_bytes)
        if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
            raise CrcError("CRC32 mismatch (corrupt or truncated file)")
        if body[:4] != magic:
            raise BadMagicError(f"expected magic {magic!r}, found {body[:4]!r}")
        (ver,) = struct.unpack("<H", body[4:6])
        if ver != version:
            raise VersionError(f"unsupported version {ver} (expected {version})")
        self._body = body
        self._pos = 6

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._body):
            raise TruncatedError("unexpected end of file body")
        out = self._body[self._pos:self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self._take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def text(self) -> str:
        return self._take(self.u16()).decode("utf-8")

    def array(self) -> np.ndarray:
        code = self.u8()
        if code not in _DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code}")
        dt = np.dtype(_DTYPE_CODES[code])
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        payload = self._take(count * dt.itemsize)
        return np.frombuffer(payload, dtype=dt).reshape(shape).copy()

    def done(self) -> None:
        if self._pos != len(self._body):
            raise FormatError(f"{len(self._body) - self._pos} trailing bytes in body")


def write_file(path, blob: bytes) -> None:
    Path(path).write_bytes(blob)


def read_file(path, magic: bytes, version: int) -> Reader:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    return Reader(blob, magic, version)
