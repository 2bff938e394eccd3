"""Byte-oriented carry-less range coder over static integer frequency tables.

Registers are 64 bits wide: ``low`` and ``range`` describe the interval
``[low, low + range)`` with ``low + range <= 2**64``. After each symbol the top
byte of ``low`` is shifted out while it is settled; when the interval
straddles a top-byte boundary and ``range`` has fallen below ``2**40`` the
range is cut back to the boundary (Subbotin's carry-less trick), so no carry
ever has to propagate into bytes already written.

The flush always writes the 8 bytes of ``low``. The decoder mirrors the
encoder exactly, re-derives every byte the encoder would have written and
rejects any stream that is not the encoding of the symbols it decoded, so
truncation, trailing bytes and corruption all raise instead of yielding
garbage.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from ..entropy_model import PmfTable

__all__ = [
    "CorruptStreamError",
    "RangeCoderError",
    "RangeDecoder",
    "RangeEncoder",
    "SymbolRangeError",
    "TruncatedStreamError",
    "overhead_bound",
    "range_decode",
    "range_encode",
]

_TOP = np.uint64(1 << 56)
_BOT = np.uint64(1 << 40)
_FULL = (1 << 64) - 1

_OK = 0
_ERR_CORRUPT = 1
_ERR_TRUNCATED = 2
_ERR_OVERFLOW = 3


class RangeCoderError(ValueError):
    pass


class SymbolRangeError(RangeCoderError):
    def __init__(self, position: int, symbol: int, table: PmfTable):
        super().__init__(f"symbol {symbol} at position {position} outside table range "
                         f"[{table.q_min}, {table.q_max}]")
        self.position = position


class TruncatedStreamError(RangeCoderError):
    pass


class CorruptStreamError(RangeCoderError):
    pass


@njit(cache=True)
def _encode_kernel(idx, cum, precision, low, rng, out, pos):
    total = cum[cum.shape[0] - 1]
    shift = np.uint64(precision)
    for i in range(idx.shape[0]):
        s = idx[i]
        r = rng >> shift
        c = np.uint64(cum[s])
        low += c * r
        if cum[s + 1] == total:
            rng = rng - c * r
        else:
            rng = np.uint64(cum[s + 1] - cum[s]) * r
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (~low + np.uint64(1)) & (_BOT - np.uint64(1))
            else:
                break
            if pos >= out.shape[0]:
                return low, rng, pos, _ERR_OVERFLOW
            out[pos] = np.uint8(low >> np.uint64(56))
            pos += 1
            low = low << np.uint64(8)
            rng = rng << np.uint64(8)
    return low, rng, pos, _OK


@njit(cache=True)
def _decode_kernel(data, count, cum, precision, low, rng, code, shifts, out):
    total = cum[cum.shape[0] - 1]
    n = cum.shape[0] - 1
    shift = np.uint64(precision)
    size = data.shape[0]
    for i in range(count):
        r = rng >> shift
        offset = code - low
        if offset >= rng:
            return low, rng, code, shifts, i, _ERR_CORRUPT
        value = offset // r
        if value >= np.uint64(total):
            value = np.uint64(total - 1)
        s = np.searchsorted(cum, np.int64(value), side="right") - 1
        if s >= n:
            s = n - 1
        out[i] = s
        c = np.uint64(cum[s])
        low += c * r
        if cum[s + 1] == total:
            rng = rng - c * r
        else:
            rng = np.uint64(cum[s + 1] - cum[s]) * r
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (~low + np.uint64(1)) & (_BOT - np.uint64(1))
            else:
                break
            if shifts >= size:
                return low, rng, code, shifts, i, _ERR_TRUNCATED
            if data[shifts] != np.uint8(low >> np.uint64(56)):
                return low, rng, code, shifts, i, _ERR_CORRUPT
            nxt = shifts + 8
            byte = np.uint64(data[nxt]) if nxt < size else np.uint64(0)
            code = (code << np.uint64(8)) | byte
            shifts += 1
            low = low << np.uint64(8)
            rng = rng << np.uint64(8)
    return low, rng, code, shifts, count, _OK


FLUSH_BYTES = 8


def overhead_bound(n_symbols: int) -> int:
    """Bytes one stream may use beyond its ideal code length: flush plus renormalization slack."""
    return FLUSH_BYTES + -(-int(n_symbols) // 4096)


def _flush_bytes(low: int) -> bytes:
    return int(low).to_bytes(FLUSH_BYTES, "big")


def _symbol_indices(symbols, table: PmfTable) -> np.ndarray:
    sym = np.asarray(symbols, dtype=np.int64).reshape(-1)
    bad = np.flatnonzero((sym < table.q_min) | (sym > table.q_max))
    if bad.size:
        i = int(bad[0])
        raise SymbolRangeError(i, int(sym[i]), table)
    return sym - table.q_min


class RangeEncoder:
    """Encodes consecutive symbol runs, each under its own table, into one stream."""

    def __init__(self):
        self._low = np.uint64(0)
        self._rng = np.uint64(_FULL)
        self._chunks: list[bytes] = []
        self._count = 0

    def encode(self, symbols, table: PmfTable) -> None:
        try:
            idx = _symbol_indices(symbols, table)
        except SymbolRangeError as err:
            raise SymbolRangeError(self._count + err.position,
                                   int(np.asarray(symbols).reshape(-1)[err.position]), table) from None
        cum = table.cumulative
        buf = np.empty(8 * idx.size + 16, dtype=np.uint8)
        low, rng, pos, status = _encode_kernel(idx, cum, table.precision, self._low, self._rng, buf, 0)
        if status != _OK:
            raise AssertionError("range coder output buffer overflow")
        self._low, self._rng = np.uint64(low), np.uint64(rng)
        self._chunks.append(buf[:pos].tobytes())
        self._count += idx.size

    def finish(self) -> bytes:
        self._chunks.append(_flush_bytes(self._low))
        return b"".join(self._chunks)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = np.frombuffer(bytes(data), dtype=np.uint8)
        head = bytes(data[:8]).ljust(8, b"\0")
        self._code = np.uint64(int.from_bytes(head, "big"))
        self._low = np.uint64(0)
        self._rng = np.uint64(_FULL)
        self._shifts = 0
        self._count = 0

    def decode(self, count: int, table: PmfTable) -> np.ndarray:
        if count < 0:
            raise ValueError("symbol count must be non-negative")
        out = np.empty(count, dtype=np.int64)
        low, rng, code, shifts, done, status = _decode_kernel(
            self._data, count, table.cumulative, table.precision,
            self._low, self._rng, self._code, self._shifts, out)
        # a mismatch after zero padding was read means the bytes ran out, not bad bytes
        if status == _ERR_TRUNCATED or (status == _ERR_CORRUPT and shifts + 8 > self._data.size):
            raise TruncatedStreamError(
                f"stream ended after {self._data.size} bytes while decoding symbol {self._count + done}")
        if status != _OK:
            raise CorruptStreamError(f"stream inconsistent at symbol {self._count + done}")
        self._low, self._rng, self._code = np.uint64(low), np.uint64(rng), np.uint64(code)
        self._shifts = shifts
        self._count += count
        return out + table.q_min

    def finish(self) -> None:
        """Check that the remaining bytes are exactly the encoder's flush."""
        tail = _flush_bytes(self._low)
        expected = self._shifts + len(tail)
        size = self._data.size
        if size < expected:
            raise TruncatedStreamError(f"stream has {size} bytes, encoder wrote {expected}")
        if size > expected:
            raise CorruptStreamError(f"{size - expected} unexpected trailing bytes")
        if self._data[self._shifts:].tobytes() != tail:
            raise CorruptStreamError("final flush bytes do not match")


def range_encode(symbols, table: PmfTable) -> bytes:
    enc = RangeEncoder()
    enc.encode(symbols, table)
    return enc.finish()


def range_decode(data: bytes, count: int, table: PmfTable) -> np.ndarray:
    dec = RangeDecoder(data)
    out = dec.decode(count, table)
    dec.finish()
    return out
