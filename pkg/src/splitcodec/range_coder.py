"""Range coder over integer symbols with 16-bit cumulative frequency tables.

The coder keeps a 64-bit ``low``/``range`` state, renormalizes a byte at a
time (carries are resolved with a cached byte and a run of pending 0xFF
bytes), and terminates each chunk with the shortest byte string that still
identifies the final interval. Decoders pad missing bytes with zeros.

Symbols outside a table's alphabet are sent through an escape slot followed
by a side bit and an order-0 Exp-Golomb code of the excess.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
MAX_ALPHABET = 1 << 15

_STATE_BITS = 64
_TOP = 1 << _STATE_BITS
_MASK = _TOP - 1
_RENORM = 1 << (_STATE_BITS - 8)
_LOW_KEEP = _RENORM - 1
_CARRY_ZONE = 0xFF << (_STATE_BITS - 8)
_STATE_BYTES = _STATE_BITS // 8

_HALF = TOTAL >> 1
_MAX_GOLOMB_ZEROS = 62


class CorruptStreamError(ValueError):
    pass


@dataclass(frozen=True)
class CdfTable:
    """Cumulative counts for symbols ``offset+lo .. offset+hi`` (plus an optional escape slot)."""

    cdf: tuple[int, ...]
    lo: int
    hi: int
    offset: int = 0
    has_escape: bool = True

    @property
    def n_symbols(self) -> int:
        return self.hi - self.lo + 1

    def validate(self) -> None:
        expected = self.n_symbols + 1 + int(self.has_escape)
        if len(self.cdf) != expected:
            raise ValueError(f"cdf has {len(self.cdf)} entries, expected {expected}")
        if self.cdf[0] != 0 or self.cdf[-1] != TOTAL:
            raise ValueError("cdf must start at 0 and end at 2^16")
        if any(b <= a for a, b in zip(self.cdf, self.cdf[1:])):
            raise ValueError("every slot needs at least one count")

    def counts(self) -> np.ndarray:
        return np.diff(np.asarray(self.cdf, dtype=np.int64))

    def code_length(self, symbol: int) -> float:
        """Ideal bits for ``symbol`` under the quantized table (escape payload excluded)."""
        idx = self._index(symbol)
        return -np.log2((self.cdf[idx + 1] - self.cdf[idx]) / TOTAL)

    def _index(self, symbol: int) -> int:
        rel = symbol - self.offset
        if self.lo <= rel <= self.hi:
            return rel - self.lo
        if not self.has_escape:
            raise ValueError(f"symbol {symbol} outside alphabet [{self.offset + self.lo}, {self.offset + self.hi}]")
        return self.n_symbols


def quantize_pmf(probs: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Integer counts summing to 2^16 per row, with at least one count per valid bin.

    One count is reserved per bin and the rest is split in proportion to
    ``probs`` by the largest-remainder method; equal remainders favour the
    lower index. Rows with no mass fall back to uniform.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        return quantize_pmf(p[None], None if valid is None else np.asarray(valid)[None])[0]
    if valid is None:
        valid = np.ones(p.shape, dtype=bool)
    if not np.all(np.isfinite(p[valid])) or np.any(p[valid] < 0):
        raise ValueError("probabilities must be finite and non-negative")
    n_valid = valid.sum(axis=1)
    if np.any(n_valid > MAX_ALPHABET + 1):
        raise ValueError(f"alphabet wider than {MAX_ALPHABET} symbols")
    if np.any(n_valid == 0):
        raise ValueError("table without symbols")
    p = np.where(valid, p, 0.0)
    mass = p.sum(axis=1, keepdims=True)
    empty = mass[:, 0] <= 0
    if np.any(empty):
        p[empty] = valid[empty].astype(np.float64)
        mass[empty] = n_valid[empty, None]
    remaining = (TOTAL - n_valid)[:, None]
    ideal = p / mass * remaining
    floor = np.floor(ideal)
    rem = np.where(valid, ideal - floor, -1.0)
    leftover = remaining[:, 0] - floor.sum(axis=1).astype(np.int64)
    order = np.argsort(-rem, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(p.shape[1])[None, :].repeat(p.shape[0], 0), axis=1)
    extra = rank < leftover[:, None]
    return np.where(valid, 1 + floor.astype(np.int64) + extra, 0)


def build_cdf_table(probs: Sequence[float], lo: int = 0, escape_mass: float | None = None, offset: int = 0) -> CdfTable:
    """Quantize interval probabilities for symbols ``lo..lo+len(probs)-1`` into a table.

    ``escape_mass=None`` builds a table without an escape slot.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probs must be a non-empty vector")
    if p.size > MAX_ALPHABET:
        raise ValueError(f"alphabet wider than {MAX_ALPHABET} symbols")
    if escape_mass is not None:
        p = np.append(p, float(escape_mass))
    counts = quantize_pmf(p)
    cdf = (0, *np.cumsum(counts).tolist())
    return CdfTable(tuple(int(c) for c in cdf), lo, lo + len(probs) - 1, offset, escape_mass is not None)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()
        self._done = False

    def _shift_low(self) -> None:
        low = self.low
        if low < _CARRY_ZONE or low >= _TOP:
            carry = low >> _STATE_BITS
            out = self._out
            out.append((self._cache + carry) & 0xFF)
            if self._cache_size > 1:
                out.extend(bytes([(0xFF + carry) & 0xFF]) * (self._cache_size - 1))
            self._cache_size = 0
            self._cache = (low >> (_STATE_BITS - 8)) & 0xFF
        self._cache_size += 1
        self.low = (low & _LOW_KEEP) << 8

    def encode_slot(self, start: int, size: int) -> None:
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * size
        while self.range < _RENORM:
            self.range <<= 8
            self._shift_low()

    def encode_bit(self, bit: int) -> None:
        self.encode_slot(_HALF if bit else 0, _HALF)

    def encode_golomb(self, n: int) -> None:
        x = n + 1
        nbits = x.bit_length()
        for _ in range(nbits - 1):
            self.encode_bit(0)
        for i in range(nbits - 1, -1, -1):
            self.encode_bit((x >> i) & 1)

    def encode_symbol(self, symbol: int, table: CdfTable) -> None:
        rel = symbol - table.offset
        cdf = table.cdf
        if table.lo <= rel <= table.hi:
            i = rel - table.lo
            self.encode_slot(cdf[i], cdf[i + 1] - cdf[i])
            return
        if not table.has_escape:
            raise ValueError(f"symbol {symbol} outside alphabet and table has no escape slot")
        i = table.n_symbols
        self.encode_slot(cdf[i], cdf[i + 1] - cdf[i])
        if rel > table.hi:
            self.encode_bit(0)
            self.encode_golomb(rel - table.hi - 1)
        else:
            self.encode_bit(1)
            self.encode_golomb(table.lo - 1 - rel)

    def finish(self) -> bytes:
        if self._done:
            return bytes(self._out)
        top = self.low + self.range
        value = self.low
        for k in range(_STATE_BYTES + 1):
            unit = 1 << (_STATE_BITS - 8 * k)
            value = -(-self.low // unit) * unit
            if value < top:
                break
        self.low = value
        for _ in range(_STATE_BYTES + 1):
            self._shift_low()
        out = self._out
        assert out[0] == 0, "leading virtual byte must be zero"
        del out[0]
        # the decoder pads at most one state width of zeros
        for _ in range(_STATE_BYTES):
            if not out or out[-1] != 0:
                break
            out.pop()
        self._done = True
        return bytes(out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.range = _MASK
        code = 0
        for _ in range(_STATE_BYTES):
            code = (code << 8) | self._next_byte()
        self.code = code

    def _next_byte(self) -> int:
        pos = self.pos
        self.pos = pos + 1
        if pos < len(self.data):
            return self.data[pos]
        if pos >= len(self.data) + _STATE_BYTES:
            raise CorruptStreamError("stream exhausted before all symbols were decoded")
        return 0

    def _take(self, start: int, size: int, r: int) -> None:
        self.code -= r * start
        self.range = r * size
        while self.range < _RENORM:
            self.range <<= 8
            self.code = (self.code << 8) | self._next_byte()

    def decode_bit(self) -> int:
        r = self.range >> PRECISION
        value = self.code // r
        if value >= TOTAL:
            raise CorruptStreamError("code value outside the table")
        bit = 1 if value >= _HALF else 0
        self._take(_HALF if bit else 0, _HALF, r)
        return bit

    def decode_golomb(self) -> int:
        zeros = 0
        while self.decode_bit() == 0:
            zeros += 1
            if zeros > _MAX_GOLOMB_ZEROS:
                raise CorruptStreamError("runaway Exp-Golomb prefix")
        x = 1
        for _ in range(zeros):
            x = (x << 1) | self.decode_bit()
        return x - 1

    def decode_symbol(self, table: CdfTable) -> int:
        r = self.range >> PRECISION
        value = self.code // r
        if value >= TOTAL:
            raise CorruptStreamError("code value outside the table")
        cdf = table.cdf
        i = bisect.bisect_right(cdf, value) - 1
        self._take(cdf[i], cdf[i + 1] - cdf[i], r)
        if i < table.n_symbols:
            return table.offset + table.lo + i
        if self.decode_bit() == 0:
            return table.offset + table.hi + 1 + self.decode_golomb()
        return table.offset + table.lo - 1 - self.decode_golomb()

    def finish(self) -> None:
        """Check that the stream was consumed exactly (up to the stripped zero padding)."""
        if self.pos < len(self.data):
            raise CorruptStreamError(f"{len(self.data) - self.pos} trailing bytes after the last symbol")


def encode(symbols: Iterable[int], tables: Sequence[CdfTable]) -> bytes:
    enc = RangeEncoder()
    symbols = list(symbols)
    if len(symbols) != len(tables):
        raise ValueError("one table per symbol is required")
    for s, t in zip(symbols, tables):
        enc.encode_symbol(int(s), t)
    return enc.finish()


def decode(data: bytes, tables: Sequence[CdfTable]) -> list[int]:
    dec = RangeDecoder(data)
    out = [dec.decode_symbol(t) for t in tables]
    dec.finish()
    return out


def ideal_bits(symbols: Iterable[int], tables: Sequence[CdfTable]) -> float:
    """Code length under the quantized tables, counting escape payload bits."""
    total = 0.0
    for s, t in zip(symbols, tables):
        total += t.code_length(int(s))
        rel = int(s) - t.offset
        if rel > t.hi or rel < t.lo:
            excess = rel - t.hi - 1 if rel > t.hi else t.lo - 1 - rel
            total += 1 + 2 * (excess + 1).bit_length() - 1
    return total


def write_varint(n: int) -> bytes:
    if n < 0:
        raise ValueError("varint must be non-negative")
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = shift = 0
    while True:
        if pos >= len(buf):
            raise CorruptStreamError("truncated varint")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise CorruptStreamError("varint too long")


def write_chunk(payload: bytes) -> bytes:
    return write_varint(len(payload)) + payload


def read_chunk(buf: bytes, pos: int) -> tuple[bytes, int]:
    n, pos = read_varint(buf, pos)
    if pos + n > len(buf):
        raise CorruptStreamError(f"chunk of {n} bytes truncated")
    return buf[pos:pos + n], pos + n
