"""Feature codec: scalar quantization to a small codebook, then LZW.

Block layout (big-endian, MSB-first bit packing)::

    u16  symbol_count
    u8   bits_per_symbol      ceil(log2(L)) of the quantizer, informational
    ...  LZW codes, packed back to back, zero-padded to a byte boundary

LZW starts from the 256 single-byte strings.  Code number ``i`` (0-based) is
written with ``max(9, (256 + i).bit_length())`` bits: the width grows by one as
soon as the dictionary size reaches ``2**width``.  The dictionary never resets.
The decoder stops after ``symbol_count`` symbols, so trailing pad bits are
ignored.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T

HEADER = struct.Struct(">HB")
MAX_SYMBOLS = 0xFFFF


class CodecError(ValueError):
    pass


@dataclass
class Quantizer:
    centers: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1)
        if c.size == 0:
            raise CodecError("quantizer needs at least one center")
        if c.size < 2:
            raise CodecError("quantizer needs L >= 2 centers")
        if not (np.diff(c) > 0).all():
            raise CodecError("quantizer centers must be strictly increasing")
        self.centers = c

    @classmethod
    def uniform(cls, lo: float, hi: float, levels: int = 8, trainable: bool = True) -> Quantizer:
        if hi <= lo:
            hi = lo + 1.0
        return cls(np.linspace(lo, hi, levels), trainable)

    @property
    def levels(self) -> int:
        return self.centers.size

    @property
    def bits(self) -> int:
        return max(1, math.ceil(math.log2(self.levels)))

    def quantize(self, x) -> np.ndarray:
        return quantize(x, self.centers)

    def dequantize(self, idx) -> np.ndarray:
        return dequantize(idx, self.centers)

    def soft(self, x, sigma: float) -> np.ndarray:
        with T.no_grad():
            return T.soft_quantize(np.asarray(x, dtype=np.float64), self.centers, sigma).data


def quantize(x, centers) -> np.ndarray:
    """Index of the nearest center for every value; ties go to the lower index."""
    c = np.asarray(centers, dtype=np.float64).reshape(-1)
    if c.size == 0:
        raise CodecError("empty center list")
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if c.size == 1:
        return np.zeros(v.size, dtype=np.uint8)
    # midpoints between neighbours; a value equal to a midpoint stays on the lower side
    mids = (c[:-1] + c[1:]) / 2.0
    idx = np.searchsorted(mids, v, side="left")
    return idx.astype(np.uint8 if c.size <= 256 else np.int64)


def dequantize(idx, centers) -> np.ndarray:
    c = np.asarray(centers, dtype=np.float64).reshape(-1)
    i = np.asarray(idx, dtype=np.int64).reshape(-1)
    if i.size and (i.min() < 0 or i.max() >= c.size):
        raise CodecError(f"quantization index out of range [0, {c.size})")
    return c[i]


def sigma_schedule(epoch: int, start: float = 1.0, every: int = 10, cap: float = 100.0) -> float:
    """Soft-quantization sharpness: doubles every ``every`` epochs, capped."""
    return min(cap, start * 2.0 ** (epoch // every))


# ----------------------------------------------------------------------- LZW

def lzw_encode(data: bytes) -> list[int]:
    data = bytes(data)
    if not data:
        return []
    table = {bytes([i]): i for i in range(256)}
    codes = []
    w = data[:1]
    for b in data[1:]:
        wc = w + bytes([b])
        if wc in table:
            w = wc
        else:
            codes.append(table[w])
            table[wc] = len(table)
            w = bytes([b])
    codes.append(table[w])
    return codes


def lzw_decode(codes) -> bytes:
    codes = list(codes)
    if not codes:
        return b""
    table = [bytes([i]) for i in range(256)]
    first = codes[0]
    if not 0 <= first < 256:
        raise CodecError(f"first LZW code must be a literal, got {first}")
    prev = table[first]
    out = [prev]
    for pos, code in enumerate(codes[1:], start=1):
        if 0 <= code < len(table):
            entry = table[code]
        elif code == len(table):
            # code being defined right now: prev + first byte of prev
            entry = prev + prev[:1]
        else:
            raise CodecError(f"LZW code {code} at position {pos} exceeds dictionary size {len(table)}")
        out.append(entry)
        table.append(prev + entry[:1])
        prev = entry
    return b"".join(out)


def code_width(i: int) -> int:
    return max(9, (256 + i).bit_length())


def pack_codes(codes) -> bytes:
    acc = 0
    nbits = 0
    for i, code in enumerate(codes):
        w = code_width(i)
        if code >> w:
            raise CodecError(f"code {code} does not fit in {w} bits")
        acc = (acc << w) | code
        nbits += w
    pad = (-nbits) % 8
    acc <<= pad
    return acc.to_bytes((nbits + pad) // 8, "big") if nbits else b""


def unpack_codes(buf: bytes, n_symbols: int) -> list[int]:
    """Read codes until they expand to ``n_symbols`` bytes."""
    acc = int.from_bytes(buf, "big")
    total = len(buf) * 8
    pos = 0
    codes: list[int] = []
    produced = 0
    # track phrase lengths alongside the dictionary to know when to stop
    lengths = [1] * 256
    prev_len = 0
    while produced < n_symbols:
        w = code_width(len(codes))
        if pos + w > total:
            raise CodecError(f"truncated LZW stream: needed {pos + w} bits, have {total}")
        code = (acc >> (total - pos - w)) & ((1 << w) - 1)
        pos += w
        if code < len(lengths):
            n = lengths[code]
        elif code == len(lengths) and codes:
            n = prev_len + 1
        else:
            raise CodecError(f"LZW code {code} exceeds dictionary size {len(lengths)}")
        if codes:
            lengths.append(prev_len + 1)
        codes.append(code)
        produced += n
        prev_len = n
    if produced != n_symbols:
        raise CodecError(f"LZW stream expands to {produced} symbols, header says {n_symbols}")
    return codes


def encode_block(symbols, bits_per_symbol: int) -> bytes:
    sym = bytes(np.asarray(symbols, dtype=np.uint8).tobytes()) if not isinstance(symbols, (bytes, bytearray)) else bytes(symbols)
    if len(sym) > MAX_SYMBOLS:
        raise CodecError(f"block holds at most {MAX_SYMBOLS} symbols, got {len(sym)}")
    return HEADER.pack(len(sym), bits_per_symbol) + pack_codes(lzw_encode(sym))


def decode_block(block: bytes) -> tuple[bytes, int]:
    """Returns (symbols, bits_per_symbol)."""
    if len(block) < HEADER.size:
        raise CodecError(f"block shorter than its {HEADER.size}-byte header")
    count, bits = HEADER.unpack_from(block)
    codes = unpack_codes(block[HEADER.size:], count)
    sym = lzw_decode(codes)
    if bits < 8 and sym and max(sym) >= (1 << bits):
        raise CodecError(f"symbol exceeds declared width of {bits} bits")
    return sym, bits


def compress_features(values, q: Quantizer) -> bytes:
    return encode_block(q.quantize(values), q.bits)


def decompress_features(block: bytes, q: Quantizer) -> np.ndarray:
    sym, _ = decode_block(block)
    return q.dequantize(np.frombuffer(sym, dtype=np.uint8))


def compression_ratio(raw_bits: float, compressed_bits: float) -> float:
    if compressed_bits <= 0:
        raise CodecError("compressed size must be positive")
    return raw_bits / compressed_bits
