"""Deterministic hashing and random number generation.

Every stochastic choice in the pipeline flows through the two primitives in
this module so that runs are reproducible bit for bit and portable across
implementations in other languages:

* ``fnv1a64`` -- the 64-bit FNV-1a hash (offset basis 0xcbf29ce484222325,
  prime 0x100000001b3), applied to raw bytes.
* ``SplitMix64`` -- a 64-bit counter-based generator.  State advances by the
  odd constant GAMMA = 0x9E3779B97F4A7C15 and each output is finalized with
  the standard mix (xor-shift 30, multiply 0xBF58476D1CE4E5B9, xor-shift 27,
  multiply 0x94D049BB133111EB, xor-shift 31).

Floats in [0, 1) take the top 53 bits of an output word: (u >> 11) * 2**-53.
"""

from __future__ import annotations

import struct
from typing import Iterable

_MASK64 = 0xFFFFFFFFFFFFFFFF

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

GAMMA = 0x9E3779B97F4A7C15

_INV_2_53 = 2.0 ** -53


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of ``data``."""
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK64
    return h


def mix64(z: int) -> int:
    """SplitMix64 output finalizer applied to a raw 64-bit state word."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Counter-based 64-bit generator.

    The sequence for seed s is mix64(s + GAMMA), mix64(s + 2*GAMMA), ...
    which makes the i-th draw of any stream O(1) to reach: it is just
    mix64(s + (i+1)*GAMMA).
    """

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + GAMMA) & _MASK64
        return mix64(self._state)

    def next_unit(self) -> float:
        """Float in [0, 1), uniform over the 53-bit grid."""
        return (self.next_u64() >> 11) * _INV_2_53

    def next_symmetric(self) -> float:
        """Float in [-1, 1): 2*u - 1 with u from next_unit."""
        return 2.0 * self.next_unit() - 1.0

    def next_below(self, n: int) -> int:
        """Integer in [0, n) via floor(u * n); n must be positive."""
        if n <= 0:
            raise ValueError("n must be positive")
        return min(int(self.next_unit() * n), n - 1)


def stream_seed(master_seed: int, index: int) -> int:
    """Seed for the ``index``-th independent child stream of ``master_seed``.

    Defined as mix64(master_seed + (index + 1) * GAMMA); distinct indices give
    decorrelated streams and any stream is reachable without advancing the
    others.
    """
    if index < 0:
        raise ValueError("index must be non-negative")
    return mix64((master_seed + (index + 1) * GAMMA) & _MASK64)


def payload_hash(kind: str, seed: int, parts: Iterable[bytes]) -> int:
    """Domain-separated hash of a request payload.

    Layout fed to FNV-1a: the ASCII ``kind`` tag, a NUL byte, the seed as a
    little-endian uint64, then each part prefixed with its little-endian
    uint64 byte length.  The length prefixes keep distinct part splits from
    colliding.
    """
    buf = bytearray(kind.encode("ascii"))
    buf.append(0)
    buf += struct.pack("<Q", seed & _MASK64)
    for part in parts:
        buf += struct.pack("<Q", len(part))
        buf += part
    return fnv1a64(bytes(buf))
