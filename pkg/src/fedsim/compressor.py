"""Unbiased stochastic quantizer with exact wire encoding and bit accounting.

Wire format: a 32-bit IEEE-754 big-endian float carrying the L2 norm, then the
signed codes packed base-(2s+1) as the digits of one big-endian multiprecision
integer, padded to a byte boundary.  The packed width is the ceiling of
d*log2(2s+1) bits, so the measured payload matches the bit-cost formula.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from fedsim.errors import FormatError, LengthError


@dataclass(frozen=True, eq=False)
class QuantizedVector:
    """Norm plus per-coordinate signed level codes in [-level, level]."""

    norm: float
    codes: np.ndarray = field(repr=False)
    level: int

    def __post_init__(self):
        object.__setattr__(self, "codes", np.asarray(self.codes, dtype=np.int64))
        if self.level < 1:
            raise ValueError(f"quantization level must be >= 1, got {self.level}")
        if not np.isfinite(self.norm) or self.norm < 0:
            raise ValueError(f"norm must be finite and nonnegative, got {self.norm}")
        if self.codes.size and int(np.abs(self.codes).max()) > self.level:
            raise ValueError("code magnitude exceeds the quantization level")
        if self.norm == 0.0 and self.codes.size and np.any(self.codes):
            raise ValueError("zero norm requires all-zero codes")

    @property
    def dim(self) -> int:
        return int(self.codes.size)

    def __eq__(self, other):
        return (
            isinstance(other, QuantizedVector)
            and self.norm == other.norm
            and self.level == other.level
            and np.array_equal(self.codes, other.codes)
        )


def quantize(x: np.ndarray, level: int, rng) -> QuantizedVector:
    """Randomized rounding of each coordinate onto the level grid scaled by ||x||.

    With r = |x_i|/||x|| and l = floor(r*s), the code magnitude is l+1 with
    probability r*s - l and l otherwise, so dequantization is unbiased.  The
    stored norm is the float32 rounding of ||x||, and the grid ratios are taken
    against that stored norm, which keeps the estimator exactly unbiased.
    """
    if level < 1:
        raise ValueError(f"quantization level must be >= 1, got {level}")
    x = np.asarray(x, dtype=np.float64)
    norm = float(np.float32(np.linalg.norm(x)))
    if norm == 0.0:
        return _make_unchecked(0.0, np.zeros(x.size, dtype=np.int64), level)
    scaled = np.abs(x)
    scaled *= level / norm
    low = np.floor(scaled)
    scaled -= low
    low += rng.random(x.size) < scaled
    np.minimum(low, float(level), out=low)
    codes = np.copysign(low, x).astype(np.int64)
    return _make_unchecked(norm, codes, level)


def _make_unchecked(norm: float, codes: np.ndarray, level: int) -> QuantizedVector:
    # quantize() guarantees the invariants by construction; skipping the
    # validating constructor matters in Monte Carlo loops.
    qv = object.__new__(QuantizedVector)
    object.__setattr__(qv, "norm", norm)
    object.__setattr__(qv, "codes", codes)
    object.__setattr__(qv, "level", level)
    return qv


def dequantize(qv: QuantizedVector) -> np.ndarray:
    """Entry i reconstructs to norm * code_i / level."""
    return qv.norm * qv.codes / qv.level


@lru_cache(maxsize=None)
def _code_bits(d: int, level: int) -> int:
    # ceil(d * log2(2s+1)) computed exactly in integer arithmetic; 2s+1 is odd,
    # so the power is never a power of two and bit_length gives the ceiling.
    return ((2 * level + 1) ** d - 1).bit_length()


def bit_cost(d: int, level: int | None) -> int:
    """Uplink bits per update: 32-bit norm plus ceil(d*log2(2s+1)) code bits.

    A level of None means the identity compressor at 32 bits per coordinate.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if level is None:
        return 32 * d
    if level < 1:
        raise ValueError("quantization level must be >= 1")
    return 32 + _code_bits(d, level)


def q_factor(d: int, level: int) -> float:
    """Compression-loss factor min(d/s^2, sqrt(d)/s) for block size d."""
    if d < 1 or level < 1:
        raise ValueError("dimension and level must be >= 1")
    return min(d / level**2, np.sqrt(d) / level)


@lru_cache(maxsize=None)
def _block_layout(d: int, base: int):
    # Pack digits in blocks whose value fits comfortably in int64 so each block
    # converts with one vectorized dot product.
    width = max(1, int(62 // np.log2(base)))
    while base**width >= 1 << 62:
        width -= 1
    sizes = [width] * (d // width)
    if d % width:
        sizes.append(d % width)
    powers = tuple(base**k for k in sizes)
    return width, tuple(sizes), powers


def encode(qv: QuantizedVector) -> bytes:
    """Serialize to the wire format; decode(encode(qv), d, level) round-trips bitwise."""
    base = 2 * qv.level + 1
    digits = qv.codes + qv.level
    width, sizes, block_pows = _block_layout(qv.dim, base)
    weights = base ** np.arange(width - 1, -1, -1, dtype=np.int64)
    value = 0
    pos = 0
    for size, pow_ in zip(sizes, block_pows):
        block = digits[pos : pos + size]
        value = value * pow_ + int(block @ weights[width - size :])
        pos += size
    nbytes = (_code_bits(qv.dim, qv.level) + 7) // 8
    return struct.pack(">f", np.float32(qv.norm)) + value.to_bytes(nbytes, "big")


def decode(payload: bytes, d: int, level: int) -> QuantizedVector:
    """Parse a wire payload back into a QuantizedVector.

    The dimension and level are run parameters known to both ends; they are not
    carried on the wire.
    """
    if d < 1 or level < 1:
        raise ValueError("dimension and level must be >= 1")
    nbytes = (_code_bits(d, level) + 7) // 8
    if len(payload) != 4 + nbytes:
        raise LengthError(f"expected {4 + nbytes} payload bytes, got {len(payload)}")
    norm = struct.unpack(">f", payload[:4])[0]
    if not np.isfinite(norm) or norm < 0:
        raise FormatError(f"invalid norm field {norm!r}")
    base = 2 * level + 1
    value = int.from_bytes(payload[4:], "big")
    if value >= base**d:
        raise FormatError("code digits out of range for the declared base")
    _, sizes, block_pows = _block_layout(d, base)
    digits = np.empty(d, dtype=np.int64)
    pos = d
    for size, pow_ in zip(reversed(sizes), reversed(block_pows)):
        value, block = divmod(value, pow_)
        for j in range(size - 1, -1, -1):
            block, digit = divmod(block, base)
            digits[pos - size + j] = digit
        pos -= size
    codes = digits - level
    if norm == 0.0 and np.any(codes):
        raise FormatError("zero norm with nonzero codes")
    return QuantizedVector(float(norm), codes, level)
