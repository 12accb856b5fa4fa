"""Little-endian byte helpers with bounds-checked reads."""
from __future__ import annotations

import struct

import numpy as np

from .errors import DecodeError


def zigzag(n: int) -> int:
    return (n << 1) if n >= 0 else ((-n) << 1) - 1


def unzigzag(z: int) -> int:
    return (z >> 1) if not (z & 1) else -((z + 1) >> 1)


def write_varint(out: bytearray, n: int) -> None:
    if n < 0:
        raise ValueError("varint must be non-negative")
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


class ByteReader:
    """Sequential reader over a bytes buffer; every overrun raises DecodeError."""

    MAX_VARINT_BYTES = 10

    def __init__(self, buf: bytes, offset: int = 0, end: int | None = None):
        self.buf = memoryview(buf)
        self.pos = offset
        self.end = len(buf) if end is None else end

    @property
    def remaining(self) -> int:
        return self.end - self.pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise DecodeError(f"truncated data: need {n} bytes at offset {self.pos}")
        chunk = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def u8(self) -> int:
        return self.unpack("<B")[0]

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def u64(self) -> int:
        return self.unpack("<Q")[0]

    def varint(self) -> int:
        n = shift = 0
        for _ in range(self.MAX_VARINT_BYTES):
            byte = self.u8()
            n |= (byte & 0x7F) << shift
            if not byte & 0x80:
                return n
            shift += 7
        raise DecodeError("varint too long")

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        if count < 0 or count * dt.itemsize > self.remaining:
            raise DecodeError(f"array of {count} x {dt} overruns buffer")
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt).copy()

    def expect_end(self) -> None:
        if self.pos != self.end:
            raise DecodeError(f"{self.end - self.pos} unexpected trailing bytes")
