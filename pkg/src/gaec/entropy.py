"""Uniform scalar quantization, canonical Huffman coding and basis-index prefix codes.

Bit order everywhere is MSB-first within a byte; length fields are little-endian.
"""
from __future__ import annotations

import heapq
import math
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ._bytes import ByteReader, unzigzag, write_varint, zigzag
from .errors import DecodeError

# Bins with |bin| above MAX_BIN are replaced by ESCAPE and the value is kept raw.
MAX_BIN = 2**31 - 2
ESCAPE = 2**31
MAX_CODE_LENGTH = 64
_LUT_BITS = 12


# --------------------------------------------------------------------------
# quantization
# --------------------------------------------------------------------------

_BIN_BITS = 20


def bin_width(d: float) -> float:
    """``d`` rounded down to 20 significant bits.

    With |bin| < 2**31 both the edges ``b * w`` and the centres ``(2b + 1) * (w / 2)``
    are then exact float64 products, so the half-bin bound holds without rounding slack.
    """
    if not (d > 0 and math.isfinite(d)):
        raise ValueError(f"bin size must be positive and finite, got {d!r}")
    m, e = math.frexp(d)
    w = math.ldexp(math.floor(m * (1 << _BIN_BITS)), e - _BIN_BITS)
    if w == 0.0:
        raise ValueError(f"bin size {d!r} is too small")
    return w


def quantize(v: float, d: float) -> int:
    """Bin index ``floor(v / w)`` with ``w = bin_width(d)``; may exceed MAX_BIN."""
    w = bin_width(d)
    if not math.isfinite(v):
        raise ValueError(f"cannot quantize non-finite value {v!r}")
    b = math.floor(v / w)
    if v < b * w:
        b -= 1
    elif v >= (b + 1) * w:
        b += 1
    return int(b)


def dequantize(b: int, d: float) -> float:
    """Bin centre ``(b + 0.5) * w``."""
    return (2 * b + 1) * (bin_width(d) / 2)


def quantize_array(values: np.ndarray, d: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised quantizer with escapes.

    Returns ``(bins, reps)``: int64 bin indices (``ESCAPE`` where the index is out of
    range) and float64 representatives (bin centres, or the raw value when escaped).
    """
    w = bin_width(d)
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    with np.errstate(over="ignore", invalid="ignore"):
        q = np.floor(v / w)
    escaped = ~(np.abs(q) <= MAX_BIN - 1)
    q = np.where(escaped, 0.0, q)
    q -= v < q * w
    q += v >= (q + 1) * w
    reps = (2 * q + 1) * (w / 2)
    bins = q.astype(np.int64)
    bins[escaped] = ESCAPE
    reps[escaped] = v[escaped]
    return bins, reps


def dequantize_array(bins: np.ndarray, raws: np.ndarray, d: float) -> np.ndarray:
    """Inverse of :func:`quantize_array`; ``raws`` feeds the escaped positions in order."""
    w = bin_width(d)
    bins = np.asarray(bins, dtype=np.int64)
    escaped = bins == ESCAPE
    if int(escaped.sum()) != len(raws):
        raise DecodeError("escape count does not match raw value count")
    if np.any(np.abs(bins[~escaped]) > MAX_BIN):
        raise DecodeError("bin index out of range")
    out = (2 * bins.astype(np.float64) + 1) * (w / 2)
    out[escaped] = raws
    return out


# --------------------------------------------------------------------------
# canonical Huffman
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HuffmanTable:
    """Canonical Huffman table: sorted symbols with their code lengths."""

    symbols: tuple[int, ...]
    lengths: tuple[int, ...]

    def __post_init__(self):
        if len(self.symbols) != len(self.lengths):
            raise DecodeError("symbol/length count mismatch")
        if any(b <= a for a, b in zip(self.symbols, self.symbols[1:])):
            raise DecodeError("Huffman symbols must be strictly increasing")
        if any(not 1 <= n <= MAX_CODE_LENGTH for n in self.lengths):
            raise DecodeError("Huffman code length out of range")
        if self.lengths:
            top = max(self.lengths)
            if sum(1 << (top - n) for n in self.lengths) > (1 << top):
                raise DecodeError("code lengths violate the Kraft inequality")

    @classmethod
    def from_frequencies(cls, freqs: dict[int, int]) -> "HuffmanTable":
        items = sorted((s, f) for s, f in freqs.items() if f > 0)
        if not items:
            return cls((), ())
        if len(items) == 1:
            return cls((items[0][0],), (1,))
        # heap entries: (weight, tiebreak, leaf symbols under this node)
        heap = [(f, i, [i]) for i, (_, f) in enumerate(items)]
        heapq.heapify(heap)
        depth = [0] * len(items)
        counter = len(items)
        while len(heap) > 1:
            fa, _, a = heapq.heappop(heap)
            fb, _, b = heapq.heappop(heap)
            for leaf in a:
                depth[leaf] += 1
            for leaf in b:
                depth[leaf] += 1
            heapq.heappush(heap, (fa + fb, counter, a + b))
            counter += 1
        if max(depth) > MAX_CODE_LENGTH:
            raise ValueError("Huffman code exceeds maximum length")
        return cls(tuple(s for s, _ in items), tuple(depth))

    @property
    def max_length(self) -> int:
        return max(self.lengths, default=0)

    def canonical_order(self) -> list[tuple[int, int]]:
        """(length, symbol) pairs in canonical code assignment order."""
        return sorted(zip(self.lengths, self.symbols))

    def codes(self) -> dict[int, tuple[int, int]]:
        """Map symbol -> (code, length)."""
        out = {}
        code = 0
        prev = 0
        for length, sym in self.canonical_order():
            code <<= length - prev
            out[sym] = (code, length)
            code += 1
            prev = length
        return out

    def to_bytes(self) -> bytes:
        out = bytearray(struct.pack("<I", len(self.symbols)))
        for sym, length in zip(self.symbols, self.lengths):
            write_varint(out, zigzag(sym))
            out.append(length)
        return bytes(out)

    @classmethod
    def read(cls, reader: ByteReader) -> "HuffmanTable":
        n = reader.u32()
        if n > reader.remaining:
            raise DecodeError("Huffman table size overruns buffer")
        syms, lens = [], []
        for _ in range(n):
            syms.append(unzigzag(reader.varint()))
            lens.append(reader.u8())
        return cls(tuple(syms), tuple(lens))


def huffman_encode(symbols: Iterable[int], table: HuffmanTable | None = None) -> tuple[HuffmanTable, bytes]:
    """Encode integer symbols.

    Returns the table and a self-delimiting payload ``u64 count | u64 nbits | bits``.
    """
    arr = np.asarray(list(symbols) if not isinstance(symbols, np.ndarray) else symbols, dtype=np.int64)
    if table is None:
        uniq, counts = np.unique(arr, return_counts=True)
        table = HuffmanTable.from_frequencies(dict(zip(uniq.tolist(), counts.tolist())))
    header = struct.pack("<Q", arr.size)
    if arr.size == 0:
        return table, header + struct.pack("<Q", 0)
    codes = table.codes()
    sym_sorted = np.array(table.symbols, dtype=np.int64)
    pos = np.searchsorted(sym_sorted, arr)
    if np.any(pos >= len(sym_sorted)) or np.any(sym_sorted[np.minimum(pos, len(sym_sorted) - 1)] != arr):
        raise ValueError("symbol not present in Huffman table")
    code_of = np.array([codes[s][0] for s in table.symbols], dtype=np.uint64)
    len_of = np.array([codes[s][1] for s in table.symbols], dtype=np.int64)
    c = code_of[pos]
    n = len_of[pos]
    nbits = int(n.sum())
    starts = np.cumsum(n) - n
    rep_c = np.repeat(c, n)
    within = np.arange(nbits, dtype=np.int64) - np.repeat(starts, n)
    shift = (np.repeat(n, n) - 1 - within).astype(np.uint64)
    bits = ((rep_c >> shift) & np.uint64(1)).astype(np.uint8)
    return table, header + struct.pack("<Q", nbits) + np.packbits(bits).tobytes()


def huffman_decode(table: HuffmanTable, payload: bytes | ByteReader) -> np.ndarray:
    """Decode a payload produced by :func:`huffman_encode`.

    Raises DecodeError on truncation, invalid codes, trailing data or non-zero padding.
    """
    reader = payload if isinstance(payload, ByteReader) else ByteReader(payload)
    count = reader.u64()
    nbits = reader.u64()
    nbytes = (nbits + 7) // 8
    if nbytes > reader.remaining:
        raise DecodeError("Huffman bitstream truncated")
    data = reader.take(nbytes)
    if not isinstance(payload, ByteReader):
        reader.expect_end()
    if count == 0:
        if nbits:
            raise DecodeError("bits present for an empty symbol stream")
        return np.zeros(0, dtype=np.int64)
    if not table.symbols:
        raise DecodeError("non-empty stream with an empty Huffman table")
    if count > nbits:
        raise DecodeError("symbol count exceeds available bits")
    if nbits % 8 and data[-1] & ((1 << (8 - nbits % 8)) - 1):
        raise DecodeError("non-zero padding bits")

    maxlen = table.max_length
    width = min(maxlen, _LUT_BITS)
    lut_sym = [0] * (1 << width)
    lut_len = [0] * (1 << width)
    order = table.canonical_order()
    first_code = {}
    first_index = {}
    n_of = Counter(table.lengths)
    code = prev = 0
    for idx, (length, sym) in enumerate(order):
        code <<= length - prev
        prev = length
        if length not in first_code:
            first_code[length] = code
            first_index[length] = idx
        if length <= width:
            lo = code << (width - length)
            for w in range(lo, lo + (1 << (width - length))):
                lut_sym[w] = sym
                lut_len[w] = length
        code += 1
    ordered_syms = [s for _, s in order]

    out = [0] * count
    acc = nacc = i = pos = 0
    for k in range(count):
        while nacc < maxlen:
            acc = (acc << 8) | (data[i] if i < nbytes else 0)
            i += 1
            nacc += 8
        w = acc >> (nacc - width)
        length = lut_len[w]
        if length:
            sym = lut_sym[w]
        else:
            sym = None
            for length in range(width + 1, maxlen + 1):
                if length in first_code:
                    off = (acc >> (nacc - length)) - first_code[length]
                    if 0 <= off < n_of[length]:
                        sym = ordered_syms[first_index[length] + off]
                        break
            if sym is None:
                raise DecodeError("invalid Huffman code in bitstream")
        pos += length
        if pos > nbits:
            raise DecodeError("Huffman bitstream ended mid-symbol")
        nacc -= length
        acc &= (1 << nacc) - 1
        out[k] = sym
    if pos != nbits:
        raise DecodeError("trailing bits after last Huffman symbol")
    return np.array(out, dtype=np.int64)


def write_symbol_stream(symbols: Sequence[int] | np.ndarray) -> bytes:
    """Table followed by payload: one self-contained entropy-coded stream."""
    table, payload = huffman_encode(symbols)
    return table.to_bytes() + payload


def read_symbol_stream(reader: ByteReader) -> np.ndarray:
    table = HuffmanTable.read(reader)
    return huffman_decode(table, reader)


def write_quantized_stream(bins: np.ndarray, raws: np.ndarray) -> bytes:
    """Huffman-coded bins followed by the float64 values of escaped entries."""
    raws = np.asarray(raws, dtype="<f8")
    return write_symbol_stream(bins) + struct.pack("<I", raws.size) + raws.tobytes()


def read_quantized_stream(reader: ByteReader) -> tuple[np.ndarray, np.ndarray]:
    bins = read_symbol_stream(reader)
    n = reader.u32()
    raws = reader.array("<f8", n)
    if int((bins == ESCAPE).sum()) != n:
        raise DecodeError("escape count does not match raw value count")
    if not np.all(np.isfinite(raws)):
        raise DecodeError("non-finite escaped value")
    return bins, raws


# --------------------------------------------------------------------------
# basis-index prefix code
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IndexCode:
    """Shortest prefix of the selection bitvector that holds every set bit."""

    prefix_len: int
    bits: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, IndexCode) and self.prefix_len == other.prefix_len
                and np.array_equal(self.bits, other.bits))

    def __str__(self):
        return "".join("1" if b else "0" for b in self.bits)


def index_encode(selected: Iterable[int], dim: int) -> IndexCode:
    idx = np.unique(np.asarray(list(selected), dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= dim):
        raise ValueError(f"index out of range [0, {dim})")
    if idx.size == 0:
        return IndexCode(0, np.zeros(0, dtype=bool))
    n = int(idx[-1]) + 1
    bits = np.zeros(n, dtype=bool)
    bits[idx] = True
    return IndexCode(n, bits)


def index_decode(code: IndexCode, dim: int) -> np.ndarray:
    """Ascending selected indices; rejects codes that are not shortest prefixes."""
    bits = np.asarray(code.bits, dtype=bool)
    if code.prefix_len != bits.size:
        raise DecodeError("index prefix length does not match bit count")
    if code.prefix_len > dim:
        raise DecodeError(f"index prefix length {code.prefix_len} exceeds dimension {dim}")
    if code.prefix_len and not bits[-1]:
        raise DecodeError("index prefix does not end in a set bit")
    return np.flatnonzero(bits).astype(np.int64)


class BitWriter:
    """Appends raw bits; output is MSB-first packed."""

    def __init__(self):
        self._chunks: list[np.ndarray] = []
        self.nbits = 0

    def write(self, bits: np.ndarray) -> None:
        bits = np.asarray(bits, dtype=np.uint8)
        self._chunks.append(bits)
        self.nbits += bits.size

    def to_bytes(self) -> bytes:
        bits = np.concatenate(self._chunks) if self._chunks else np.zeros(0, np.uint8)
        return struct.pack("<Q", self.nbits) + np.packbits(bits).tobytes()


class BitReader:
    def __init__(self, reader: ByteReader):
        self.nbits = reader.u64()
        nbytes = (self.nbits + 7) // 8
        if nbytes > reader.remaining:
            raise DecodeError("raw bit section truncated")
        data = np.frombuffer(reader.take(nbytes), dtype=np.uint8)
        self.bits = np.unpackbits(data)
        if self.bits[self.nbits:].any():
            raise DecodeError("non-zero padding bits")
        self.pos = 0

    def read(self, n: int) -> np.ndarray:
        if self.pos + n > self.nbits:
            raise DecodeError("raw bit section exhausted")
        out = self.bits[self.pos:self.pos + n].astype(bool)
        self.pos += n
        return out

    def expect_end(self) -> None:
        if self.pos != self.nbits:
            raise DecodeError("unread raw bits")
