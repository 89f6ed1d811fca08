"""Fixed-point encoding of real vectors into integers modulo ``R``.

All protocol messages are :class:`FixedVector` values: unsigned integers in
``[0, R)`` that represent signed reals with ``frac_bits`` fractional bits.
Negative values use the modular complement ``R - |v|``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class CodecMismatch(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FixedPointCodec:
    """Public fixed-point parameters shared by every party.

    ``modulus`` defaults to ``2**modulus_bits``. Passing an explicit modulus
    is supported for arithmetic only (small worked examples); mask
    generation and serialization assume the power-of-two default.
    """

    frac_bits: int = 16
    modulus_bits: int = 32
    modulus: int | None = None

    def __post_init__(self):
        if not 1 <= self.modulus_bits <= 64:
            raise ValueError("modulus_bits must be in [1, 64]")
        if self.modulus is None:
            object.__setattr__(self, "modulus", 1 << self.modulus_bits)
        elif not 2 <= self.modulus <= (1 << self.modulus_bits):
            raise ValueError("explicit modulus must fit in modulus_bits")
        if self.modulus == 1 << self.modulus_bits and self.modulus_bits < self.frac_bits + 2:
            raise ValueError("modulus_bits must be >= frac_bits + 2")

    @property
    def scale(self) -> float:
        return float(1 << self.frac_bits)

    @property
    def power_of_two(self) -> bool:
        return self.modulus == 1 << self.modulus_bits

    @property
    def max_abs(self) -> float:
        """Largest magnitude that encodes without wrapping."""
        return (self.modulus // 2 - 1) / self.scale

    @property
    def word_bytes(self) -> int:
        return (self.modulus_bits + 7) // 8

    def reduce(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.uint64)
        if self.power_of_two:
            if self.modulus_bits == 64:
                return values
            return values & np.uint64(self.modulus - 1)
        return values % np.uint64(self.modulus)

    def check_sum_capacity(self, n_terms: int, max_abs_value: float) -> None:
        """Raise if ``n_terms`` values of magnitude ``max_abs_value`` can overflow the sum."""
        if n_terms * max_abs_value * self.scale >= self.modulus / 2:
            raise OverflowError(
                f"{n_terms} terms of magnitude {max_abs_value} overflow modulus 2^{self.modulus_bits}"
                f" with {self.frac_bits} fractional bits"
            )


@dataclass(frozen=True, eq=False)
class FixedVector:
    values: np.ndarray
    codec: FixedPointCodec = field(default_factory=FixedPointCodec)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.uint64)
        if v.ndim != 1:
            raise ValueError("FixedVector values must be one-dimensional")
        if v.size and not self.codec.modulus_bits == 64 and int(v.max()) >= self.codec.modulus:
            raise ValueError("FixedVector element outside [0, R)")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __add__(self, other: "FixedVector") -> "FixedVector":
        return add_mod(self, other)

    def __neg__(self) -> "FixedVector":
        return negate(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FixedVector):
            return NotImplemented
        return self.codec == other.codec and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        head = ", ".join(str(int(x)) for x in self.values[:4])
        more = ", ..." if len(self) > 4 else ""
        return f"FixedVector([{head}{more}], d={len(self)}, R=2^{self.codec.modulus_bits})"

    @classmethod
    def zeros(cls, length: int, codec: FixedPointCodec) -> "FixedVector":
        return cls(np.zeros(length, dtype=np.uint64), codec)

    def to_bytes(self) -> bytes:
        """Length-prefixed little-endian words of ``codec.word_bytes`` bytes each."""
        w = self.codec.word_bytes
        raw = self.values.astype("<u8").tobytes()
        if w != 8:
            raw = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 8)[:, :w].tobytes()
        return struct.pack("<I", len(self)) + raw

    @classmethod
    def from_bytes(cls, data: bytes, codec: FixedPointCodec) -> "FixedVector":
        vec, _ = cls.read_from(data, codec)
        return vec

    @classmethod
    def read_from(cls, data: bytes, codec: FixedPointCodec, offset: int = 0) -> tuple["FixedVector", int]:
        (length,) = struct.unpack_from("<I", data, offset)
        w = codec.word_bytes
        start = offset + 4
        end = start + length * w
        if end > len(data):
            raise ValueError("truncated FixedVector payload")
        words = np.frombuffer(data[start:end], dtype=np.uint8).reshape(length, w)
        if w != 8:
            padded = np.zeros((length, 8), dtype=np.uint8)
            padded[:, :w] = words
            words = padded
        values = np.frombuffer(words.tobytes(), dtype="<u8").astype(np.uint64)
        return cls(values, codec), end


def encode(x, codec: FixedPointCodec, clip: bool = False) -> FixedVector:
    """Encode reals as ``round(x * 2^f) mod R``.

    Out-of-range values raise :class:`OverflowError` unless ``clip`` is set,
    in which case they are saturated to the representable range. Clipping is
    meant for DP-noised values, where it is harmless post-processing.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.ndim != 1:
        raise ValueError("encode expects a vector")
    if not np.all(np.isfinite(x)):
        raise OverflowError("cannot encode non-finite values")
    scaled = np.rint(x * codec.scale)
    limit = float(codec.modulus // 2 - 1)
    if clip:
        scaled = np.clip(scaled, -limit, limit)
    elif np.any(np.abs(scaled) > limit):
        raise OverflowError(
            f"value {x[np.argmax(np.abs(scaled))]!r} exceeds fixed-point range ±{codec.max_abs}"
        )
    ints = scaled.astype(np.int64)
    if codec.power_of_two:
        return FixedVector(codec.reduce(ints.view(np.uint64)), codec)
    return FixedVector(np.mod(ints, codec.modulus).astype(np.uint64), codec)


def decode(v: FixedVector) -> np.ndarray:
    """Inverse of :func:`encode`; words in ``[R/2, R)`` are negative."""
    codec = v.codec
    vals = v.values
    half = codec.modulus // 2
    if codec.modulus_bits == 64 and codec.power_of_two:
        signed = vals.view(np.int64).astype(np.float64)
    else:
        neg = vals >= np.uint64(half)
        signed = vals.astype(np.float64)
        # exact for modulus_bits <= 53; subtract in integers otherwise
        if codec.modulus_bits <= 53:
            signed[neg] -= float(codec.modulus)
        else:
            signed = np.where(
                neg,
                -((np.uint64(codec.modulus - 1) - vals) + np.uint64(1)).astype(np.float64),
                signed,
            )
    return signed / codec.scale


def _check_compatible(a: FixedVector, b: FixedVector) -> None:
    if a.codec != b.codec:
        raise CodecMismatch(f"{a.codec} != {b.codec}")
    if len(a) != len(b):
        raise LengthMismatch(f"lengths {len(a)} and {len(b)} differ")


def add_mod(a: FixedVector, b: FixedVector) -> FixedVector:
    _check_compatible(a, b)
    codec = a.codec
    if codec.power_of_two:
        # uint64 wraps mod 2^64, a multiple of R
        return FixedVector(codec.reduce(a.values + b.values), codec)
    if codec.modulus > 1 << 63:
        raise ValueError("non-power-of-two modulus above 2^63 is unsupported")
    return FixedVector((a.values + b.values) % np.uint64(codec.modulus), codec)


def negate(a: FixedVector) -> FixedVector:
    codec = a.codec
    if codec.power_of_two:
        return FixedVector(codec.reduce(np.uint64(0) - a.values), codec)
    return FixedVector((np.uint64(codec.modulus) - a.values) % np.uint64(codec.modulus), codec)


def sum_mod(vectors) -> FixedVector:
    vectors = list(vectors)
    if not vectors:
        raise ValueError("sum_mod of an empty sequence")
    total = vectors[0]
    for v in vectors[1:]:
        total = add_mod(total, v)
    return total
