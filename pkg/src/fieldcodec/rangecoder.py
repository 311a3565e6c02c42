"""Byte-wise binary range coder over 16-bit cumulative frequency tables.

Carry-propagating variant: 32-bit range, 64-bit low accumulator on the
encoder, pending-0xFF run tracked through a one-byte cache. Total symbol
mass is always 1 << 16, so the per-symbol range split is a shift.
"""

import numpy as np

TOP = 1 << 24
TOTAL = 1 << 16
MASK32 = 0xFFFFFFFF


class RangeCoderError(ValueError):
    pass


class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._range = MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def _shift_low(self):
        low = self._low
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            out = self._out
            out.append((self._cache + carry) & 0xFF)
            filler = (0xFF + carry) & 0xFF
            for _ in range(self._cache_size - 1):
                out.append(filler)
            self._cache_size = 0
            self._cache = (low >> 24) & 0xFF
        self._cache_size += 1
        self._low = (low << 8) & MASK32

    def encode(self, cum_lo, cum_hi):
        r = self._range >> 16
        self._low += r * cum_lo
        self._range = r * (cum_hi - cum_lo)
        while self._range < TOP:
            self._shift_low()
            self._range = (self._range << 8) & MASK32

    def finish(self):
        for _ in range(5):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data):
        self._data = data
        self._pos = 0
        self._range = MASK32
        code = 0
        for _ in range(5):
            code = (code << 8) | self._next_byte()
        self._code = code & MASK32  # leading cache byte of the encoder is 0

    def _next_byte(self):
        # reads past the flush return 0, matching the encoder's implicit tail
        if self._pos < len(self._data):
            b = self._data[self._pos]
            self._pos += 1
            return b
        self._pos += 1
        return 0

    def decode(self, cum):
        """Decode one symbol against a cumulative table, returning its index."""
        r = self._range >> 16
        f = self._code // r
        if f >= TOTAL:
            f = TOTAL - 1
        s = int(np.searchsorted(cum, f, side="right")) - 1
        lo = int(cum[s])
        hi = int(cum[s + 1])
        self._code -= r * lo
        self._range = r * (hi - lo)
        while self._range < TOP:
            self._code = ((self._code << 8) | self._next_byte()) & 0xFFFFFFFFFF
            self._range = (self._range << 8) & MASK32
        return s


def encode_symbols(symbols, cums):
    """Range-code a symbol sequence.

    cums is either a single cumulative table shared by every symbol, or a
    sequence (list or 2D array) with one table row per symbol. Tables hold
    cum[0] = 0 and cum[-1] = 65536.
    """
    enc = RangeEncoder()
    if isinstance(cums, np.ndarray) and cums.ndim == 2:
        rows = cums
        for i, s in enumerate(symbols):
            row = rows[i]
            enc.encode(int(row[s]), int(row[s + 1]))
    elif isinstance(cums, (list, tuple)):
        for s, row in zip(symbols, cums):
            enc.encode(int(row[s]), int(row[s + 1]))
    else:
        row = cums
        lo = row[:-1]
        hi = row[1:]
        for s in symbols:
            enc.encode(int(lo[s]), int(hi[s]))
    return enc.finish()


def decode_symbols(data, cums, n):
    """Inverse of encode_symbols for the same table layout and symbol count."""
    dec = RangeDecoder(data)
    out = np.empty(n, dtype=np.int64)
    if isinstance(cums, np.ndarray) and cums.ndim == 2:
        if len(cums) < n:
            raise RangeCoderError(f"{n} symbols requested but only {len(cums)} tables")
        for i in range(n):
            out[i] = dec.decode(cums[i])
    elif isinstance(cums, (list, tuple)):
        if len(cums) < n:
            raise RangeCoderError(f"{n} symbols requested but only {len(cums)} tables")
        for i in range(n):
            out[i] = dec.decode(cums[i])
    else:
        for i in range(n):
            out[i] = dec.decode(cums)
    return out


def uniform_cum(n_symbols):
    """Cumulative table for a uniform model over n_symbols."""
    if not 1 <= n_symbols <= TOTAL:
        raise RangeCoderError(f"uniform alphabet size {n_symbols} out of range")
    base, rem = divmod(TOTAL, n_symbols)
    freqs = np.full(n_symbols, base, dtype=np.uint32)
    freqs[:rem] += 1
    cum = np.zeros(n_symbols + 1, dtype=np.uint32)
    np.cumsum(freqs, out=cum[1:])
    return cum


class BitWriter:
    """MSB-first bit packer for the plain (non-range-coded) side streams."""

    def __init__(self):
        self._acc = 0
        self._nbits = 0
        self._out = bytearray()

    def write(self, value, nbits):
        if nbits:
            self._acc = (self._acc << nbits) | (value & ((1 << nbits) - 1))
            self._nbits += nbits
            while self._nbits >= 8:
                self._nbits -= 8
                self._out.append((self._acc >> self._nbits) & 0xFF)
            self._acc &= (1 << self._nbits) - 1

    def write_unary(self, q):
        # q ones then a zero
        while q >= 32:
            self.write(0xFFFFFFFF, 32)
            q -= 32
        self.write((1 << (q + 1)) - 2, q + 1)

    def finish(self):
        if self._nbits:
            self._out.append((self._acc << (8 - self._nbits)) & 0xFF)
            self._acc = 0
            self._nbits = 0
        return bytes(self._out)


class BitReader:
    def __init__(self, data):
        self._data = data
        self._pos = 0
        self._acc = 0
        self._nbits = 0

    def read(self, nbits):
        while self._nbits < nbits:
            if self._pos >= len(self._data):
                raise RangeCoderError("bitstream exhausted")
            self._acc = (self._acc << 8) | self._data[self._pos]
            self._pos += 1
            self._nbits += 8
        self._nbits -= nbits
        val = (self._acc >> self._nbits) & ((1 << nbits) - 1)
        self._acc &= (1 << self._nbits) - 1
        return val

    def read_unary(self):
        q = 0
        while self.read(1):
            q += 1
        return q
