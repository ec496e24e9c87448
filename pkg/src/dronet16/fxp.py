"""16-bit Q-format fixed-point arithmetic with exact wide accumulation.

Every quantized tensor in this project shares the same scalar semantics:
two's-complement int16 raws scaled by 2**-frac_bits, rounding to nearest
with ties to even, and saturation (never wraparound) at the format
bounds.  Dot products accumulate in wide integers with no intermediate
rounding and round exactly once at the end, so any summation order and
any worker count produce bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RAW_MIN = -(1 << 15)
RAW_MAX = (1 << 15) - 1

# Largest number of products a single accumulation may absorb while the
# int64 array path stays exact (|a*b| <= 2^30, 2^16 * 2^30 < 2^63).
MAX_EXACT_FAN_IN = 1 << 16


class QFormatError(ValueError):
    """Invalid Q-format description or mismatched formats."""


@dataclass(frozen=True)
class QFormat:
    """Layout of a 16-bit fixed-point word: Qm.n with n = frac_bits.

    The integer field (including sign) has 16 - frac_bits bits, so the
    representable range is [-2**(15-n), 2**(15-n) - 2**-n] with a step
    of 2**-n.  Q5.11 spans [-16, 16 - 2**-11].
    """

    frac_bits: int
    total_bits: int = 16

    def __post_init__(self) -> None:
        if self.total_bits != 16:
            raise QFormatError(f"only 16-bit formats are supported, got {self.total_bits}")
        if not 0 <= self.frac_bits <= 15:
            raise QFormatError(f"frac_bits must be in [0, 15], got {self.frac_bits}")

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return -float(1 << (15 - self.frac_bits))

    @property
    def max_value(self) -> float:
        return float(1 << (15 - self.frac_bits)) - self.step

    @property
    def name(self) -> str:
        return f"Q{16 - self.frac_bits}.{self.frac_bits}"

    def covers(self, lo: float, hi: float) -> bool:
        return lo >= self.min_value and hi <= self.max_value


Q5_11 = QFormat(11)
Q2_14 = QFormat(14)
Q9_7 = QFormat(7)


def covering_format(lo: float, hi: float) -> QFormat:
    """Most precise 16-bit format whose range contains [lo, hi].

    Raises QFormatError when no 16-bit format can hold the range
    (i.e. some magnitude reaches 2**15).
    """
    if lo > hi:
        raise QFormatError(f"empty range [{lo}, {hi}]")
    for frac_bits in range(15, -1, -1):
        fmt = QFormat(frac_bits)
        if fmt.covers(lo, hi):
            return fmt
    raise QFormatError(f"range [{lo}, {hi}] exceeds every 16-bit format")


@dataclass(frozen=True)
class FxpScalar:
    """A single fixed-point value: int16 raw plus its format."""

    raw: int
    fmt: QFormat

    def __post_init__(self) -> None:
        if not RAW_MIN <= self.raw <= RAW_MAX:
            raise QFormatError(f"raw {self.raw} outside int16")

    @property
    def value(self) -> float:
        return self.raw * self.fmt.step


@dataclass(frozen=True)
class Accumulator:
    """Exact wide accumulator for sums of int16*int16 products.

    raw is an unbounded Python integer, so overflow is impossible in the
    scalar path; frac_bits is fixed to the sum of the operand formats'
    fractional bits at creation.
    """

    frac_bits: int
    raw: int = 0

    @property
    def value(self) -> float:
        return self.raw * 2.0 ** -self.frac_bits


def _round_half_even_rshift(value: int, shift: int) -> int:
    """Exact round-to-nearest-ties-to-even of value / 2**shift."""
    if shift <= 0:
        return value << -shift
    q = value >> shift
    r = value - (q << shift)
    half = 1 << (shift - 1)
    if r > half or (r == half and (q & 1)):
        q += 1
    return q


def quantize(x: float, fmt: QFormat) -> FxpScalar:
    """Nearest representable value of x in fmt, saturating at the bounds."""
    scalar, _ = quantize_with_flag(x, fmt)
    return scalar


def quantize_with_flag(x: float, fmt: QFormat) -> tuple[FxpScalar, bool]:
    """quantize plus a flag reporting whether saturation occurred.

    Scaling by a power of two is exact in binary floating point, so
    round() applies ties-to-even to the true scaled value.
    """
    scaled = round(x * float(1 << fmt.frac_bits))
    saturated = scaled < RAW_MIN or scaled > RAW_MAX
    raw = min(max(scaled, RAW_MIN), RAW_MAX)
    return FxpScalar(raw, fmt), saturated


def dequantize(x: FxpScalar) -> float:
    return x.value


def mac(acc: Accumulator, a: FxpScalar, b: FxpScalar) -> Accumulator:
    """acc + a*b, exactly.  Commutative and associative by construction."""
    if acc.frac_bits != a.fmt.frac_bits + b.fmt.frac_bits:
        raise QFormatError(
            f"accumulator frac {acc.frac_bits} != {a.fmt.frac_bits} + {b.fmt.frac_bits}"
        )
    return Accumulator(acc.frac_bits, acc.raw + a.raw * b.raw)


def requantize(acc: Accumulator, out_fmt: QFormat) -> FxpScalar:
    """Single terminal rounding of an exact accumulator into out_fmt."""
    scalar, _ = requantize_with_flag(acc, out_fmt)
    return scalar


def requantize_with_flag(acc: Accumulator, out_fmt: QFormat) -> tuple[FxpScalar, bool]:
    rounded = _round_half_even_rshift(acc.raw, acc.frac_bits - out_fmt.frac_bits)
    saturated = rounded < RAW_MIN or rounded > RAW_MAX
    raw = min(max(rounded, RAW_MIN), RAW_MAX)
    return FxpScalar(raw, out_fmt), saturated


# ---------------------------------------------------------------------------
# Vectorized counterparts used by the layer kernels.  Semantics are
# identical to the scalar ops above; saturation is reported as a count.

def quantize_array(x: np.ndarray, fmt: QFormat) -> tuple[np.ndarray, int]:
    """Quantize a float array; returns (int16 raws, saturation count)."""
    scaled = np.rint(np.asarray(x, dtype=np.float64) * float(1 << fmt.frac_bits))
    n_sat = int(np.count_nonzero((scaled < RAW_MIN) | (scaled > RAW_MAX)))
    raw = np.clip(scaled, RAW_MIN, RAW_MAX).astype(np.int16)
    return raw, n_sat


def dequantize_array(raw: np.ndarray, fmt: QFormat) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) * fmt.step


def requantize_array(acc: np.ndarray, acc_frac_bits: int, out_fmt: QFormat) -> tuple[np.ndarray, int]:
    """Round-half-even shift of an exact int64 accumulator array into out_fmt."""
    acc = np.asarray(acc, dtype=np.int64)
    shift = acc_frac_bits - out_fmt.frac_bits
    if shift <= 0:
        rounded = acc << (-shift)
    else:
        q = acc >> shift  # arithmetic shift: floor division
        r = acc - (q << shift)
        half = np.int64(1) << (shift - 1)
        rounded = q + ((r > half) | ((r == half) & ((q & 1) == 1)))
    n_sat = int(np.count_nonzero((rounded < RAW_MIN) | (rounded > RAW_MAX)))
    raw = np.clip(rounded, RAW_MIN, RAW_MAX).astype(np.int16)
    return raw, n_sat


def saturating_add(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    """Elementwise int16 + int16 with saturation; formats must match upstream."""
    s = a.astype(np.int32) + b.astype(np.int32)
    n_sat = int(np.count_nonzero((s < RAW_MIN) | (s > RAW_MAX)))
    return np.clip(s, RAW_MIN, RAW_MAX).astype(np.int16), n_sat
