"""Bit-array plumbing: packing, base64 wire encoding, carryless products, CRC-64."""

from __future__ import annotations

import base64

import numpy as np

try:
    import gmpy2

    _mpz = gmpy2.mpz
except ImportError:  # pragma: no cover - gmpy2 is a declared dependency
    _mpz = int


def as_bits(x) -> np.ndarray:
    """Coerce a 0/1 sequence to a uint8 array, rejecting other values."""
    arr = np.asarray(x)
    if arr.dtype == np.uint8 and arr.ndim == 1:
        return arr
    arr = np.asarray(arr, dtype=np.int64).ravel()
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValueError("bit array must contain only 0 and 1")
    return arr.astype(np.uint8)


def pack_bits_b64(bits) -> str:
    """Pack bits MSB-first into bytes and base64-encode (wire format for bit arrays)."""
    bits = as_bits(bits)
    return base64.b64encode(np.packbits(bits).tobytes()).decode("ascii")


def unpack_bits_b64(s: str, count: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(s), dtype=np.uint8)
    bits = np.unpackbits(raw, count=count)
    return bits


def pack_key_bytes(bits) -> bytes:
    """Pack a key MSB-first into bytes (binary key-file format)."""
    return np.packbits(as_bits(bits)).tobytes()


def clmul_bits(a, b) -> np.ndarray:
    """Carryless (GF(2)) polynomial product of two bit arrays.

    Returns the full product, length len(a)+len(b)-1. Small inputs go through
    an exact integer convolution; large ones through a Kronecker-substitution
    big-integer multiply (bits spaced g apart so coefficient sums cannot carry),
    which stays exact at any size.
    """
    a = as_bits(a)
    b = as_bits(b)
    if a.size == 0 or b.size == 0:
        return np.zeros(0, dtype=np.uint8)
    out_len = a.size + b.size - 1
    if a.size * b.size <= 1 << 22:
        conv = np.convolve(a.astype(np.int64), b.astype(np.int64))
        return (conv & 1).astype(np.uint8)
    g = int(min(a.size, b.size)).bit_length() + 1
    pa = _spaced_int(a, g)
    pb = _spaced_int(b, g)
    prod = pa * pb
    nbytes = (g * (a.size + b.size) + 7) // 8 + 8
    raw = int(prod).to_bytes(nbytes, "little")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    return bits[: out_len * g : g].copy()


def _spaced_int(bits: np.ndarray, g: int):
    arr = np.zeros(bits.size * g, dtype=np.uint8)
    arr[::g] = bits
    return _mpz(int.from_bytes(np.packbits(arr, bitorder="little").tobytes(), "little"))


# CRC-64/ECMA-182 polynomial; used for the reconciliation verification hash.
_CRC64_POLY = np.uint64(0x42F0E1EBA9EA3693)


def _crc64_table() -> np.ndarray:
    table = np.zeros(256, dtype=np.uint64)
    for byte in range(256):
        crc = np.uint64(byte) << np.uint64(56)
        for _ in range(8):
            if crc & np.uint64(1 << 63):
                crc = np.uint64((int(crc) << 1) & 0xFFFFFFFFFFFFFFFF) ^ _CRC64_POLY
            else:
                crc = np.uint64((int(crc) << 1) & 0xFFFFFFFFFFFFFFFF)
        table[byte] = crc
    return table


_CRC64_TABLE = _crc64_table()


def crc64(data: bytes, init: int = 0) -> int:
    """Table-driven CRC-64 with a caller-provided initial register value."""
    crc = init & 0xFFFFFFFFFFFFFFFF
    table = _CRC64_TABLE
    for byte in data:
        crc = ((crc << 8) & 0xFFFFFFFFFFFFFFFF) ^ int(table[((crc >> 56) ^ byte) & 0xFF])
    return crc


def key_hash(bits, seed: int) -> int:
    """64-bit verification hash of a key: CRC-64 over the packed bits."""
    return crc64(pack_key_bytes(bits), init=seed)
