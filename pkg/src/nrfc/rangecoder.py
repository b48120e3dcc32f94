"""Reference byte-wise range coder and cumulative-frequency tables.

This module is normative: any alternative engine must produce byte-identical
output. State is 32-bit ``low``/``range`` with byte-wise renormalization;
carries are handled by delaying one byte in a cache and counting pending
0xFF bytes. Frequencies use 16-bit precision (tables always total 65536 and
every slot, including the final escape slot, has frequency >= 1). Symbols
outside a table's regular range are escape-coded: the escape slot followed
by a raw 16-bit offset payload. The encoder flushes 5 bytes, so an empty
stream costs exactly 5 bytes.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

from .errors import CodingError, TruncatedError

PRECISION = 16
TOTAL = 1 << PRECISION
ESCAPE_BIAS = 1 << 15  # raw escape payload covers offset - 32768 .. offset + 32767

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
FLUSH_BYTES = 5


class RangeEncoder:
    """Arithmetic encoder over cumulative-frequency intervals."""

    def __init__(self):
        self._low = 0          # < 2**33; bit 32 is the pending carry
        self._range = _MASK32
        self._cache = 0
        self._cache_size = 1   # the first flushed byte is a leading zero
        self._out = bytearray()
        self._finished = False

    def encode(self, cum_lo: int, freq: int, total: int = TOTAL) -> None:
        """Narrow the interval to [cum_lo, cum_lo + freq) / total."""

        if self._finished:
            raise CodingError("encoder already finished")
        if freq <= 0 or cum_lo < 0 or cum_lo + freq > total or total > TOTAL:
            raise CodingError(
                "invalid interval", cum_lo=cum_lo, freq=freq, total=total
            )
        r = self._range // total
        self._low += cum_lo * r
        self._range = freq * r
        while self._range < _TOP:
            self._range = (self._range << 8) & _MASK32
            self._shift_low()

    def _shift_low(self) -> None:
        low = self._low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            out = self._out
            out.append((self._cache + carry) & 0xFF)
            filler = (0xFF + carry) & 0xFF
            for _ in range(self._cache_size - 1):
                out.append(filler)
            self._cache_size = 0
            self._cache = (low >> 24) & 0xFF
        self._cache_size += 1
        self._low = (low << 8) & _MASK32

    def finish(self) -> bytes:
        if not self._finished:
            for _ in range(FLUSH_BYTES):
                self._shift_low()
            self._finished = True
        return bytes(self._out)


class RangeDecoder:
    """Mirror of :class:`RangeEncoder`; reads past-the-end raises
    :class:`TruncatedError` with the failing byte position."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._range = _MASK32
        self._code = 0
        self._r = 0
        for _ in range(FLUSH_BYTES):
            self._code = ((self._code << 8) | self._next_byte()) & _MASK32

    def _next_byte(self) -> int:
        pos = self._pos
        if pos >= len(self._data):
            raise TruncatedError("coded stream ended early", position=pos)
        self._pos = pos + 1
        return self._data[pos]

    def decode_freq(self, total: int = TOTAL) -> int:
        """Return the frequency point of the next symbol in [0, total)."""

        self._r = self._range // total
        v = self._code // self._r
        return total - 1 if v >= total else v

    def decode_update(self, cum_lo: int, freq: int) -> None:
        """Consume the symbol whose interval is [cum_lo, cum_lo + freq)."""

        self._code -= cum_lo * self._r
        self._range = freq * self._r
        while self._range < _TOP:
            self._code = ((self._code << 8) | self._next_byte()) & _MASK32
            self._range = (self._range << 8) & _MASK32


class CdfTable:
    """Cumulative frequency table over a contiguous integer symbol range.

    ``cum`` has ``n_regular + 2`` entries: ``cum[0] == 0``, strictly
    increasing, ``cum[-1] == TOTAL``. Slot ``i < n_regular`` codes symbol
    ``offset + i``; the last slot is the escape. Strict monotonicity is what
    guarantees every frequency >= 1.
    """

    __slots__ = ("offset", "cum")

    def __init__(self, offset: int, cum: Sequence[int]):
        cum = list(cum)
        if len(cum) < 2 or cum[0] != 0 or cum[-1] != TOTAL:
            raise CodingError("cumulative table must run from 0 to 65536")
        for a, b in zip(cum, cum[1:]):
            if b <= a:
                raise CodingError("cumulative table must be strictly increasing")
        self.offset = int(offset)
        self.cum = cum

    @property
    def n_regular(self) -> int:
        return len(self.cum) - 2

    def frequencies(self) -> list[int]:
        return [b - a for a, b in zip(self.cum, self.cum[1:])]

    @classmethod
    def from_pmf(cls, offset: int, probs: Sequence[float],
                 escape_prob: float = 0.0) -> "CdfTable":
        freqs = quantize_pmf(list(probs) + [max(0.0, escape_prob)])
        cum = [0]
        for f in freqs:
            cum.append(cum[-1] + f)
        return cls(offset, cum)

    @classmethod
    def from_counts(cls, offset: int, counts: Sequence[int]) -> "CdfTable":
        total = float(sum(counts))
        if total <= 0:
            raise CodingError("histogram is empty")
        return cls.from_pmf(offset, [c / total for c in counts])

    def __eq__(self, other) -> bool:
        return (isinstance(other, CdfTable)
                and self.offset == other.offset and self.cum == other.cum)

    def __repr__(self) -> str:
        return f"CdfTable(offset={self.offset}, n_regular={self.n_regular})"


def quantize_pmf(probs: Sequence[float]) -> list[int]:
    """Deterministically quantize a pmf (last entry = escape) to integer
    frequencies summing to TOTAL with every frequency >= 1.

    Rounds half away from zero, then repairs the total against the largest
    frequency (ties broken by lowest index).
    """

    if len(probs) > TOTAL // 2:
        raise CodingError("table too large for frequency precision")
    freqs = [max(1, int(p * TOTAL + 0.5)) for p in probs]
    diff = TOTAL - sum(freqs)
    if diff > 0:
        freqs[freqs.index(max(freqs))] += diff
    while diff < 0:
        i = freqs.index(max(freqs))
        take = min(freqs[i] - 1, -diff)
        if take == 0:
            raise CodingError("cannot normalize pmf to frequency precision")
        freqs[i] -= take
        diff += take
    return freqs


def encode_symbols(symbols: Sequence[int], contexts: Sequence[int],
                   tables: Sequence[CdfTable]) -> bytes:
    """Entropy-code ``symbols`` where ``contexts[i]`` selects the table for
    symbol ``i``. Deterministic; the byte stream is normative."""

    if len(symbols) != len(contexts):
        raise CodingError("symbols and contexts must have equal length",
                          symbols=len(symbols), contexts=len(contexts))
    enc = RangeEncoder()
    encode = enc.encode
    n_tables = len(tables)
    for i, (s, ctx) in enumerate(zip(symbols, contexts)):
        s = int(s)
        ctx = int(ctx)
        if not 0 <= ctx < n_tables:
            raise CodingError("symbol has no table", index=i, context=ctx)
        t = tables[ctx]
        cum = t.cum
        idx = s - t.offset
        if 0 <= idx < len(cum) - 2:
            encode(cum[idx], cum[idx + 1] - cum[idx])
        else:
            esc = len(cum) - 2
            encode(cum[esc], TOTAL - cum[esc])
            v = s - t.offset + ESCAPE_BIAS
            if not 0 <= v < TOTAL:
                raise CodingError("symbol outside escape range",
                                  index=i, symbol=s, offset=t.offset)
            encode(v, 1)
    return enc.finish()


def decode_symbols(data: bytes, contexts: Sequence[int],
                   tables: Sequence[CdfTable]) -> list[int]:
    """Inverse of :func:`encode_symbols`; ``contexts`` fixes the count and
    per-symbol tables."""

    dec = RangeDecoder(data)
    decode_freq = dec.decode_freq
    decode_update = dec.decode_update
    n_tables = len(tables)
    out = []
    append = out.append
    for i, ctx in enumerate(contexts):
        ctx = int(ctx)
        if not 0 <= ctx < n_tables:
            raise CodingError("symbol has no table", index=i, context=ctx)
        t = tables[ctx]
        cum = t.cum
        f = decode_freq()
        idx = bisect_right(cum, f) - 1
        decode_update(cum[idx], cum[idx + 1] - cum[idx])
        if idx == len(cum) - 2:
            v = decode_freq()
            decode_update(v, 1)
            append(v - ESCAPE_BIAS + t.offset)
        else:
            append(t.offset + idx)
    return out


def code_length_bits(symbols: Sequence[int], contexts: Sequence[int],
                     tables: Sequence[CdfTable]) -> float:
    """Ideal code length in bits under the quantized tables (escape events
    cost the escape slot plus 16 raw bits)."""

    from math import log2

    bits = 0.0
    for s, ctx in zip(symbols, contexts):
        t = tables[int(ctx)]
        idx = int(s) - t.offset
        cum = t.cum
        if 0 <= idx < len(cum) - 2:
            bits += -log2((cum[idx + 1] - cum[idx]) / TOTAL)
        else:
            esc = len(cum) - 2
            bits += -log2((TOTAL - cum[esc]) / TOTAL) + PRECISION
    return bits


def serialize_table(table: CdfTable) -> bytes:
    """Wire form shared with alternative engines: offset i32, regular-symbol
    count u16, then the interior cumulative values as u16 (first and last
    entries are implicit 0 and TOTAL). Little-endian."""

    import struct

    n = table.n_regular
    return struct.pack(f"<iH{n}H", table.offset, n, *table.cum[1:n + 1])


def deserialize_table(buf: bytes, pos: int = 0) -> tuple[CdfTable, int]:
    import struct

    if pos + 6 > len(buf):
        raise TruncatedError("table header ended early", position=pos)
    offset, n = struct.unpack_from("<iH", buf, pos)
    pos += 6
    if pos + 2 * n > len(buf):
        raise TruncatedError("table body ended early", position=pos)
    interior = struct.unpack_from(f"<{n}H", buf, pos)
    pos += 2 * n
    return CdfTable(offset, [0, *interior, TOTAL]), pos
