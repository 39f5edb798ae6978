"""Bit-exact codecs for microscaling (MX) number formats.

Element formats: E2M1 (FP4), E4M3 and E5M2 (FP8, OCP conventions).
Scale formats: E8M0 (power-of-two byte) and E4M3.
Plus nibble packing for FP4 payloads.

All encoders are vectorized over numpy arrays and reject non-finite
inputs (none of these formats is used to transport NaN/Inf here; the
quantization pipeline clamps before encoding).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "ElementKind",
    "ScaleKind",
    "ElementFormat",
    "MxFormatSpec",
    "E2M1",
    "E4M3",
    "E5M2",
    "MXFP8_E4M3",
    "MXFP8_E5M2",
    "MXFP4",
    "NVFP4",
    "FORMATS",
    "PackedFp4Buffer",
    "encode_e2m1",
    "decode_e2m1",
    "encode_fp8",
    "decode_fp8",
    "pack_fp4",
    "unpack_fp4",
    "e8m0_encode",
    "e8m0_decode",
    "E8M0_BIAS",
    "E8M0_MAX_RAW",
]


class ElementKind(Enum):
    E2M1 = "e2m1"
    E4M3 = "e4m3"
    E5M2 = "e5m2"


class ScaleKind(Enum):
    E8M0 = "e8m0"
    E4M3 = "e4m3"


@dataclass(frozen=True)
class ElementFormat:
    """Static description of one element format.

    ``e_max`` is the unbiased exponent of the largest normal number,
    ``upper`` the largest finite magnitude (lower bound is ``-upper``).
    """

    kind: ElementKind
    bits: int
    exp_bits: int
    mant_bits: int
    bias: int
    e_max: int
    upper: float

    @property
    def lower(self) -> float:
        return -self.upper


E2M1 = ElementFormat(ElementKind.E2M1, bits=4, exp_bits=2, mant_bits=1,
                     bias=1, e_max=2, upper=6.0)
E4M3 = ElementFormat(ElementKind.E4M3, bits=8, exp_bits=4, mant_bits=3,
                     bias=7, e_max=8, upper=448.0)
E5M2 = ElementFormat(ElementKind.E5M2, bits=8, exp_bits=5, mant_bits=2,
                     bias=15, e_max=15, upper=57344.0)


@dataclass(frozen=True)
class MxFormatSpec:
    """One MX block format: element layout + shared-scale layout + block size."""

    name: str
    element: ElementFormat
    scale_kind: ScaleKind
    block_size: int

    # True for formats whose elements are additionally rescaled by the
    # per-row quantization scale (the two-level scheme); MXFP4 uses a
    # single power-of-two block scale only.
    two_level: bool = True


MXFP8_E4M3 = MxFormatSpec("mxfp8_e4m3", E4M3, ScaleKind.E8M0, block_size=32)
MXFP8_E5M2 = MxFormatSpec("mxfp8_e5m2", E5M2, ScaleKind.E8M0, block_size=32)
MXFP4 = MxFormatSpec("mxfp4", E2M1, ScaleKind.E8M0, block_size=32, two_level=False)
NVFP4 = MxFormatSpec("nvfp4", E2M1, ScaleKind.E4M3, block_size=16)

FORMATS: dict[str, MxFormatSpec] = {
    f.name: f for f in (MXFP8_E4M3, MXFP8_E5M2, MXFP4, NVFP4)
}
FORMATS["mxfp8"] = MXFP8_E4M3

E8M0_BIAS = 127
E8M0_MAX_RAW = 254

# Decoded magnitudes of the 8 positive E2M1 codes, indexed by (E << 1) | M.
_E2M1_MAGNITUDES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
_E2M1_DECODE_TABLE = np.concatenate([_E2M1_MAGNITUDES, -_E2M1_MAGNITUDES])


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what}: input contains non-finite values")


def encode_e2m1(x) -> np.ndarray:
    """Encode values in [-6, 6] to 4-bit E2M1 codes (round to nearest, ties to even).

    Returns uint8 codes with layout (sign << 3) | (exp << 1) | mantissa.
    Scalar input yields a 0-d array; index with ``int(...)``.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, "encode_e2m1")
    ax = np.abs(x)
    if np.any(ax > 6.0):
        raise ValueError("encode_e2m1: input magnitude exceeds 6.0")
    # Exponent field chosen so the binade already contains the rounded
    # result: boundaries sit at the midpoints 0.75, 1.75, 3.5 between the
    # largest value of one binade and the smallest of the next (a midpoint
    # itself rounds up, onto the even-mantissa code).
    e = ((ax >= 0.75).astype(np.uint8) + (ax >= 1.75) + (ax >= 3.5))
    xn = ax / np.exp2(np.maximum(e, 1).astype(np.float64) - 1.0)
    # Within a binade the two candidates are (1, 1.5) x 2^(e-1); for the
    # subnormal binade (0, 0.5). Ties prefer mantissa 0, hence strict >.
    m = np.where(e == 0, xn > 0.25, xn > 1.25)
    sign = (np.signbit(x) & (ax > 0)).astype(np.uint8)
    return ((sign << 3) | (e << 1) | m).astype(np.uint8)


def decode_e2m1(code) -> np.ndarray:
    """Decode 4-bit E2M1 codes to exact float values (both zeros -> 0.0)."""
    code = np.asarray(code)
    return _E2M1_DECODE_TABLE[code & 0xF]


def pack_fp4(codes) -> "PackedFp4Buffer":
    """Pack 4-bit codes pairwise into bytes: value (H << 4) | L.

    L is the even-index element, H the odd-index one; an odd tail leaves
    the final high nibble zero.
    """
    codes = np.asarray(codes, dtype=np.uint8).ravel()
    n = codes.size
    padded = np.zeros(2 * ((n + 1) // 2), dtype=np.uint8)
    padded[:n] = codes & 0xF
    pairs = padded.reshape(-1, 2)
    return PackedFp4Buffer(bytes_=(pairs[:, 1] << 4) | pairs[:, 0], logical_len=n)


def unpack_fp4(buf: "PackedFp4Buffer") -> np.ndarray:
    """Inverse of :func:`pack_fp4`; returns ``logical_len`` uint8 codes."""
    b = np.asarray(buf.bytes_, dtype=np.uint8)
    out = np.empty(2 * b.size, dtype=np.uint8)
    out[0::2] = b & 0xF
    out[1::2] = b >> 4
    return out[: buf.logical_len]


@dataclass(frozen=True)
class PackedFp4Buffer:
    """Nibble-packed FP4 payload; ``len(bytes_) == ceil(logical_len / 2)``."""

    bytes_: np.ndarray
    logical_len: int


def e8m0_encode(e) -> np.ndarray:
    """Store the power-of-two exponent ``e`` as an E8M0 byte: clamp(e + 127, 0, 254)."""
    e = np.asarray(e)
    return np.clip(e + E8M0_BIAS, 0, E8M0_MAX_RAW).astype(np.uint8)


def e8m0_decode(raw) -> np.ndarray:
    """Decoded scale value 2^(raw - 127)."""
    raw = np.asarray(raw)
    return np.exp2(raw.astype(np.float64) - E8M0_BIAS)


def _fp8_layout(fmt: ElementFormat):
    if fmt.kind is ElementKind.E4M3:
        return fmt
    if fmt.kind is ElementKind.E5M2:
        return fmt
    raise ValueError(f"not an 8-bit element format: {fmt.kind}")


def encode_fp8(x, fmt: ElementFormat) -> np.ndarray:
    """Encode finite values to 8-bit codes of ``fmt`` (RNE, saturating).

    E4M3 follows the OCP convention: no infinities, exponent field all
    ones is still a normal number except for the single NaN pattern.
    E5M2 is IEEE-like but we never emit its Inf/NaN codes.
    """
    fmt = _fp8_layout(fmt)
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, "encode_fp8")
    ax = np.abs(x)
    sign = np.signbit(x).astype(np.uint8) << 7

    # Quantize |x| onto the format grid: step 2^(e - mant_bits) within the
    # binade of e = floor(log2 ax), floored at the subnormal exponent.
    _, ex = np.frexp(ax)
    e = np.clip(ex - 1, 1 - fmt.bias, fmt.e_max)
    step = np.exp2(e.astype(np.float64) - fmt.mant_bits)
    q = np.round(ax / step)  # numpy rounds halves to even
    mag = np.minimum(q * step, fmt.upper)

    # Re-derive exponent/mantissa fields from the quantized magnitude
    # (rounding may have carried into the next binade).
    _, ex2 = np.frexp(mag)
    e2 = np.clip(ex2 - 1, 1 - fmt.bias, fmt.e_max)
    scaled = mag / np.exp2(e2.astype(np.float64))
    normal = scaled >= 1.0
    exp_field = np.where(normal, e2 + fmt.bias, 0).astype(np.uint8)
    mant_field = np.where(
        normal,
        np.round((scaled - 1.0) * (1 << fmt.mant_bits)),
        np.round(scaled * (1 << fmt.mant_bits)),
    ).astype(np.uint8)
    code = sign | (exp_field << fmt.mant_bits) | mant_field
    # Zero magnitude always encodes as +0, matching the E2M1 codec.
    return np.where(mag == 0.0, np.uint8(0), code).astype(np.uint8)


def decode_fp8(code, fmt: ElementFormat) -> np.ndarray:
    """Decode 8-bit codes of ``fmt``; NaN/Inf patterns decode per OCP rules."""
    fmt = _fp8_layout(fmt)
    code = np.asarray(code, dtype=np.uint8)
    table = _fp8_decode_table(fmt)
    return table[code]


_FP8_TABLES: dict[ElementKind, np.ndarray] = {}


def _fp8_decode_table(fmt: ElementFormat) -> np.ndarray:
    table = _FP8_TABLES.get(fmt.kind)
    if table is not None:
        return table
    codes = np.arange(256)
    sign = np.where(codes >> 7, -1.0, 1.0)
    exp_field = (codes >> fmt.mant_bits) & ((1 << fmt.exp_bits) - 1)
    mant_field = codes & ((1 << fmt.mant_bits) - 1)
    frac = mant_field / (1 << fmt.mant_bits)
    normal = exp_field > 0
    value = np.where(
        normal,
        np.exp2(exp_field.astype(np.float64) - fmt.bias) * (1.0 + frac),
        np.exp2(1.0 - fmt.bias) * frac,
    )
    value = sign * value
    if fmt.kind is ElementKind.E4M3:
        # 0b?_1111_111 is the only NaN; every other all-ones-exponent code
        # is a normal number (no infinities).
        value = np.where((codes & 0x7F) == 0x7F, np.nan, value)
    else:
        all_ones = exp_field == (1 << fmt.exp_bits) - 1
        value = np.where(all_ones & (mant_field == 0), sign * np.inf, value)
        value = np.where(all_ones & (mant_field != 0), np.nan, value)
    _FP8_TABLES[fmt.kind] = value
    return value
