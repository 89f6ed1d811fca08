"""Deterministic keyed pseudorandom streams.

Two constructions, both frozen so every party (and any other implementation)
derives identical values from the same seed:

* ``hash_words`` -- BLAKE2b in counter mode. Block ``j`` of the stream for
  ``(seed, counter)`` is ``blake2b(seed || u64le(counter) || u64le(j),
  digest_size=64, person=domain)``; each digest yields eight little-endian
  uint64 words, so element ``i`` is word ``i % 8`` of block ``i // 8``.
* ``keyed_generator`` -- a numpy Philox4x64 counter-based generator keyed by
  the first 32 bytes of ``blake2b(seed || u64le(counter), person=domain)``.
  Used where bulk volume (projection matrices) makes per-block hashing slow.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np
from scipy.special import ndtri

WORDS_PER_BLOCK = 8
_U64 = struct.Struct("<Q")


def _person(domain: bytes) -> bytes:
    if len(domain) > 16:
        raise ValueError("domain tag is limited to 16 bytes")
    return domain


def hash_block(seed: bytes, counter: int, block: int, domain: bytes = b"") -> bytes:
    h = hashlib.blake2b(digest_size=64, person=_person(domain))
    h.update(seed)
    h.update(_U64.pack(counter))
    h.update(_U64.pack(block))
    return h.digest()


def hash_words(seed: bytes, counter: int, count: int, domain: bytes = b"") -> np.ndarray:
    """First ``count`` uint64 words of the stream keyed by ``(seed, counter)``."""
    n_blocks = -(-count // WORDS_PER_BLOCK)
    h0 = hashlib.blake2b(digest_size=64, person=_person(domain))
    h0.update(seed)
    h0.update(_U64.pack(counter))
    chunks = []
    for j in range(n_blocks):
        h = h0.copy()
        h.update(_U64.pack(j))
        chunks.append(h.digest())
    return np.frombuffer(b"".join(chunks), dtype="<u8")[:count].astype(np.uint64)


class HashStream:
    """Sequential reader over ``hash_words`` with unbiased bounded integers."""

    def __init__(self, seed: bytes, counter: int = 0, domain: bytes = b""):
        self.seed = seed
        self.counter = counter
        self.domain = domain
        self._block = 0
        self._buf: list[int] = []

    def next_word(self) -> int:
        if not self._buf:
            digest = hash_block(self.seed, self.counter, self._block, self.domain)
            self._buf = list(struct.unpack("<8Q", digest))[::-1]
            self._block += 1
        return self._buf.pop()

    def randbelow(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection on 64-bit words."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            w = self.next_word()
            if w < limit:
                return w % n


def keyed_generator(seed: bytes, counter: int = 0, domain: bytes = b"") -> np.random.Generator:
    key = hashlib.blake2b(seed + _U64.pack(counter), digest_size=32, person=_person(domain)).digest()
    key_words = np.frombuffer(key, dtype="<u8").astype(np.uint64)[:2]
    return np.random.Generator(np.random.Philox(key=key_words))


def open_uniform(gen: np.random.Generator, size) -> np.ndarray:
    """Uniforms on the open interval (0, 1) from the top 53 bits of raw words."""
    raw = gen.bit_generator.random_raw(size)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def keyed_gaussian(seed: bytes, counter: int, shape, domain: bytes = b"") -> np.ndarray:
    """Standard normals by inverse CDF of the keyed uniform stream."""
    size = int(np.prod(shape))
    u = open_uniform(keyed_generator(seed, counter, domain), size)
    return ndtri(u).reshape(shape)


def derive_seed(master: bytes | int, *labels) -> bytes:
    """Named sub-seed, e.g. ``derive_seed(seed, "noise", party_id)``."""
    if isinstance(master, int):
        master = master.to_bytes(16, "little", signed=False)
    h = hashlib.blake2b(master, digest_size=32, person=b"xsilo-derive")
    for label in labels:
        h.update(b"\x1f" + str(label).encode())
    return h.digest()


def named_rng(master: bytes | int, *labels) -> np.random.Generator:
    """numpy Generator for a named stream; the only sanctioned source of simulation randomness."""
    return keyed_generator(derive_seed(master, *labels))
