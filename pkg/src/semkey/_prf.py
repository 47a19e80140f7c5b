"""Canonical hashing and counter-mode PRF helpers shared by key and mark modules."""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_TWO_53 = float(1 << 53)


def _encode(field) -> bytes:
    if isinstance(field, bool):
        raise TypeError("bool fields are ambiguous; pass int or bytes")
    if isinstance(field, int):
        return b"i" + struct.pack(">q", field)
    if isinstance(field, str):
        field = field.encode("utf-8")
    if isinstance(field, (bytes, bytearray, memoryview)):
        field = bytes(field)
        return b"b" + struct.pack(">Q", len(field)) + field
    raise TypeError(f"cannot hash field of type {type(field).__name__}")


def canonical_hash(tag: str, *fields) -> bytes:
    """SHA-256 over a length-prefixed serialization of ``tag`` and ``fields``.

    Every field carries a type byte and (for byte strings) an explicit length,
    so ``("ab", "c")`` and ``("a", "bc")`` never collide.
    """
    h = hashlib.sha256()
    h.update(_encode(tag))
    for f in fields:
        h.update(_encode(f))
    return h.digest()


def words_to_unit(words: np.ndarray) -> np.ndarray:
    """Map uint64 words to floats in the open interval (0, 1) with 53-bit precision.

    The top 53 bits m give m / 2**53, which is exact; m = 0 maps to 2**-54.
    (Centering every cell at (m + 1/2) / 2**53 would round the top cell to 1.0.)
    """
    m = (words >> np.uint64(11)).astype(np.float64)
    return np.where(m == 0.0, 0.5, m) / _TWO_53


def prf_words(seed: bytes, n: int, start_block: int = 0) -> np.ndarray:
    """``n`` uint64 words from SHA-256 in counter mode: block i = H(seed || i)."""
    n_blocks = (n + 3) // 4
    buf = b"".join(
        hashlib.sha256(seed + struct.pack(">Q", start_block + i)).digest()
        for i in range(n_blocks)
    )
    return np.frombuffer(buf, dtype=">u8")[:n].astype(np.uint64)


def prf_uniforms(seed: bytes, n: int) -> np.ndarray:
    return words_to_unit(prf_words(seed, n))


def gaussian_from_seed(seed: bytes, d: int) -> np.ndarray:
    """``d`` i.i.d. standard normals: counter-mode SHA-256 uniforms through Box-Muller."""
    if d < 1:
        raise ValueError("d must be >= 1")
    m = (d + 1) // 2
    u = prf_uniforms(seed, 2 * m)
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * m)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:d]
