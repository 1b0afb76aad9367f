"""Fixed-point scalar and tensor primitives.

Two code grids are used throughout the toolkit:

* unit-range codes: a value w in [-1, 1] is stored as a signed b-bit
  two's-complement integer on the 2^b-point grid with step 2^-(b-1).
  Quantization maps w to an unsigned level round(2^(b-1) * (w + 1)),
  clamps it to [0, 2^b - 1], and re-centres by subtracting 2^(b-1).
  Decoding is code * 2^-(b-1).

* q-format codes: a real f is stored as a signed integer carrying q
  fractional bits, code = trunc(f * 2^q + c) clamped to the b-bit
  two's-complement range. The rounding constant c implements
  round-half-away-from-zero (c = +0.5 for f >= 0, -0.5 otherwise);
  the sign-flipped constant used by some kernels is available behind
  ``toward_zero`` and rounds magnitudes down instead.

Round-half-away-from-zero is the single rounding rule everywhere,
including the integer right-shift in :func:`rescale`.

Accumulation is modelled by :class:`Accumulator`, a functional value:
``sat_add`` returns a new accumulator whose value saturates at the
two's-complement bounds of its width and whose ``sat_count`` records
how many adds clamped.

Weight/activation/feature codes use widths 2..16. Biases and
accumulators are wider (up to 32); the same q-format ops serve both,
with the narrow range enforced where the contract requires it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, InvalidRescale, QFormatError

BITS_MIN = 2
BITS_MAX = 16
WIDE_BITS_MAX = 32
QFORMAT_MAX = 30

# Tolerance for float drift past +/-1 accepted by the unit-range quantizer.
UNIT_RANGE_SLACK = 1e-9


def check_bits(bits: int, wide: bool = False) -> None:
    """Validate a code width; ``wide=True`` admits accumulator widths up to 32."""
    hi = WIDE_BITS_MAX if wide else BITS_MAX
    if not isinstance(bits, (int, np.integer)) or isinstance(bits, bool):
        raise InvalidInput(f"bit width must be an integer, got {bits!r}")
    if not BITS_MIN <= bits <= hi:
        raise InvalidInput(f"bit width {bits} outside [{BITS_MIN}, {hi}]")


def check_qformat(q: int) -> None:
    if not isinstance(q, (int, np.integer)) or isinstance(q, bool):
        raise InvalidInput(f"q-format must be an integer, got {q!r}")
    if not 0 <= q <= QFORMAT_MAX:
        raise InvalidInput(f"q-format {q} outside [0, {QFORMAT_MAX}]")


def code_bounds(bits: int) -> tuple[int, int]:
    """Two's-complement bounds (lo, hi) for a given width."""
    half = 1 << (bits - 1)
    return -half, half - 1


def round_half_away(x):
    """Round to nearest integer, halves away from zero. Works on arrays."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _require_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise InvalidInput(f"non-finite {what}")


def quantize_unit(w, bits: int):
    """Quantize unit-range values to signed codes on the 2^bits-point grid.

    Inputs must satisfy |w| <= 1 + 1e-9 (small drift is clamped); anything
    further out is a caller bug and raises InvalidInput.
    """
    check_bits(bits)
    w = np.asarray(w, dtype=np.float64)
    _require_finite(w, "input to quantize_unit")
    if np.any(np.abs(w) > 1.0 + UNIT_RANGE_SLACK):
        worst = float(np.max(np.abs(w)))
        raise InvalidInput(f"|w| = {worst} exceeds unit range")
    half = 1 << (bits - 1)
    u = round_half_away(half * (np.clip(w, -1.0, 1.0) + 1.0))
    u = np.clip(u, 0, (1 << bits) - 1)
    return (u - half).astype(np.int64)


def dequantize_unit(codes, bits: int):
    """Decode unit-range codes: code * 2^-(bits-1)."""
    check_bits(bits)
    codes = np.asarray(codes)
    lo, hi = code_bounds(bits)
    if np.any(codes < lo) or np.any(codes > hi):
        raise InvalidInput(f"code outside {bits}-bit range")
    return codes.astype(np.float64) * 2.0 ** -(bits - 1)


def quantize_qformat(values, bits: int, q: int, toward_zero: bool = False):
    """Quantize reals to signed q-format codes: trunc(f * 2^q + c), saturating.

    c is +0.5 for f >= 0 and -0.5 for f < 0 (round-half-away-from-zero).
    ``toward_zero`` flips the constant's sign so magnitudes round down.
    """
    check_bits(bits, wide=True)
    check_qformat(q)
    values = np.asarray(values, dtype=np.float64)
    _require_finite(values, "input to quantize_qformat")
    scaled = values * (2.0**q)
    if toward_zero:
        c = np.where(values < 0, 0.5, -0.5)
    else:
        c = np.where(values < 0, -0.5, 0.5)
    lo, hi = code_bounds(bits)
    return np.clip(np.trunc(scaled + c), lo, hi).astype(np.int64)


def dequantize_qformat(codes, q: int):
    """Decode q-format codes: code * 2^-q."""
    check_qformat(q)
    return np.asarray(codes).astype(np.float64) * 2.0**-q


def select_qformat(max_abs: float, bits: int) -> int:
    """Largest q (capped at 30) such that max_abs * 2^q fits the signed range.

    Guarantees max_abs * 2^q <= 2^(bits-1); only an exactly boundary-valued
    input can clamp on the positive side.
    """
    check_bits(bits)
    if not (isinstance(max_abs, (int, float, np.floating, np.integer))
            and math.isfinite(max_abs)) or max_abs <= 0:
        raise QFormatError(f"max_abs must be positive and finite, got {max_abs!r}")
    q = bits - 1 - math.ceil(math.log2(max_abs))
    return max(0, min(QFORMAT_MAX, q))


def rescale(values, from_q: int, to_q: int, bits: int):
    """Reduce fractional bits by a rounded right shift, saturating to ``bits``.

    Only down-shifts exist in the integer pipeline; to_q > from_q raises
    InvalidRescale. The shift rounds half away from zero:
    sign(v) * ((|v| + 2^(shift-1)) >> shift).
    """
    check_qformat(from_q)
    check_qformat(to_q)
    check_bits(bits, wide=True)
    if to_q > from_q:
        raise InvalidRescale(f"cannot rescale q={from_q} up to q={to_q}")
    values = np.asarray(values).astype(np.int64)
    shift = from_q - to_q
    if shift > 0:
        mag = (np.abs(values) + (1 << (shift - 1))) >> shift
        values = np.sign(values) * mag
    lo, hi = code_bounds(bits)
    return np.clip(values, lo, hi)


@dataclass(frozen=True)
class Accumulator:
    """Saturating two's-complement accumulator state (updated functionally)."""

    value: int = 0
    bits: int = 16
    sat_count: int = 0

    def __post_init__(self):
        check_bits(self.bits, wide=True)
        lo, hi = code_bounds(self.bits)
        if not lo <= self.value <= hi:
            raise InvalidInput(f"accumulator value {self.value} outside {self.bits}-bit range")


def sat_add(acc: Accumulator, x: int) -> Accumulator:
    """Add x to the accumulator, clamping at its width; clamps bump sat_count."""
    raw = acc.value + int(x)
    lo, hi = code_bounds(acc.bits)
    clamped = min(max(raw, lo), hi)
    return Accumulator(
        value=clamped,
        bits=acc.bits,
        sat_count=acc.sat_count + (1 if clamped != raw else 0),
    )


@dataclass
class FxpTensor:
    """A tensor of signed fixed-point codes with a shared (bits, q) format.

    Codes are stored flat as int32; ``array`` gives the shaped view and
    ``real`` the decoded float64 values (exact: every code is dyadic).
    """

    codes: np.ndarray
    shape: tuple[int, ...]
    bits: int
    q: int

    def __post_init__(self):
        check_bits(self.bits, wide=True)
        check_qformat(self.q)
        self.shape = tuple(int(s) for s in self.shape)
        self.codes = np.asarray(self.codes, dtype=np.int64).ravel()
        lo, hi = code_bounds(self.bits)
        if self.codes.size != int(np.prod(self.shape, dtype=np.int64)):
            raise InvalidInput(
                f"{self.codes.size} codes cannot fill shape {self.shape}")
        if self.codes.size and (self.codes.min() < lo or self.codes.max() > hi):
            raise InvalidInput(f"codes outside {self.bits}-bit range")
        self.codes = self.codes.astype(np.int32)

    @property
    def array(self) -> np.ndarray:
        return self.codes.reshape(self.shape)

    @property
    def real(self) -> np.ndarray:
        return self.array.astype(np.float64) * 2.0**-self.q

    @classmethod
    def from_real(cls, values, bits: int, q: int, toward_zero: bool = False) -> "FxpTensor":
        values = np.asarray(values, dtype=np.float64)
        codes = quantize_qformat(values, bits, q, toward_zero=toward_zero)
        return cls(codes=codes, shape=values.shape, bits=bits, q=q)
