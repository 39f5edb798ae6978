"""Dual mixed-precision block quantization.

One in-process pipeline turns a (rows x head_dim) tensor into two MX
representations at once:

* a 4-bit path: E2M1 elements, nibble-packed, with a per-block shared
  scale (E4M3 scale per 16 for NVFP4, E8M0 power-of-two per 32 for MXFP4);
* an 8-bit path: FP8 elements with an E8M0 shared scale per 32.

A per-group quantization scale (per token / per 32-block / per tensor)
stretches values into the combined scale-times-element range of the
4-bit format before block scales are derived, so outliers survive
without clipping.  Queries are pre-multiplied by log2(e)/sqrt(D) so the
attention engine can exponentiate scores in base 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .formats import (
    E4M3,
    MXFP4,
    MXFP8_E4M3,
    NVFP4,
    E8M0_BIAS,
    ElementKind,
    MxFormatSpec,
    PackedFp4Buffer,
    decode_e2m1,
    decode_fp8,
    e8m0_decode,
    encode_e2m1,
    encode_fp8,
    pack_fp4,
    unpack_fp4,
)

__all__ = [
    "Granularity",
    "DualQuantizedTensor",
    "quantize_dual",
    "dequantize_low",
    "dequantize_high",
    "softmax_prescale",
    "QUANT_RANGE",
]

# Combined two-level range: E4M3 scale bound times E2M1 element bound.
QUANT_RANGE = 448.0 * 6.0

# Smallest positive E4M3 value; floor for stored NVFP4 block scales so a
# tiny-but-nonzero block never divides by a zero scale.
_E4M3_MIN_SUBNORMAL = 2.0 ** -9


class Granularity(Enum):
    """Grouping of the quantization scale."""

    TENSOR = "tensor"
    BLOCK = "block"
    TOKEN = "token"


@dataclass
class DualQuantizedTensor:
    """Paired low-bit and high-bit encodings of one (rows x cols) tensor.

    ``scales_low`` holds E4M3 codes (NVFP4, one per 16 columns) or raw
    E8M0 bytes (MXFP4, one per 32 columns).  ``scales_high`` is always
    raw E8M0, one per 32 columns.  ``quant_scale`` has one entry per
    granularity group and multiplies both paths, except the MXFP4 low
    path which is single-level.
    """

    shape: tuple[int, int]
    low_format: MxFormatSpec
    high_format: MxFormatSpec
    granularity: Granularity
    packed_low: PackedFp4Buffer
    scales_low: np.ndarray
    high_codes: np.ndarray
    scales_high: np.ndarray
    quant_scale: np.ndarray
    softmax_prescaled: bool


def softmax_prescale(x: np.ndarray) -> np.ndarray:
    """Fold the base-2 softmax factor log2(e)/sqrt(D) into a query tensor."""
    d = x.shape[-1]
    return x * (math.log2(math.e) / math.sqrt(d))


def _group_max(ax: np.ndarray, granularity: Granularity) -> np.ndarray:
    rows, cols = ax.shape
    if granularity is Granularity.TOKEN:
        return ax.max(axis=1, keepdims=True)
    if granularity is Granularity.TENSOR:
        return ax.max().reshape(1, 1)
    if granularity is Granularity.BLOCK:
        return ax.reshape(rows, cols // 32, 32).max(axis=2)
    raise ValueError(f"unknown granularity: {granularity!r}")


def _per_column(scale: np.ndarray, cols: int) -> np.ndarray:
    """Broadcast a group-shaped scale array to one value per column."""
    if scale.shape[1] in (1,):
        return scale
    return np.repeat(scale, cols // scale.shape[1], axis=1)


def _floor_log2(x: np.ndarray) -> np.ndarray:
    # frexp is exact; avoids log2 rounding at powers of two.
    _, e = np.frexp(x)
    return e - 1


def quantize_dual(
    x: np.ndarray,
    is_query: bool = False,
    low_format: MxFormatSpec = NVFP4,
    high_format: MxFormatSpec = MXFP8_E4M3,
    granularity: Granularity = Granularity.TOKEN,
) -> DualQuantizedTensor:
    """Quantize ``x`` into its paired 4-bit and 8-bit MX representations.

    ``x`` must be 2-D with the column count divisible by 32.  When
    ``is_query`` is set the input is first multiplied by
    log2(e)/sqrt(cols).  All-zero groups store scale 1.0 (or exponent
    -127) and zero element codes, so they dequantize to exact zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D tensor, got shape {x.shape}")
    rows, cols = x.shape
    if cols % 32 != 0:
        raise ValueError(f"column count {cols} not divisible by 32")
    if not np.all(np.isfinite(x)):
        raise ValueError("quantize_dual: input contains non-finite values")
    if low_format.element.kind is not ElementKind.E2M1:
        raise ValueError(f"low format must have E2M1 elements, got {low_format.name}")
    if high_format.element.bits != 8:
        raise ValueError(f"high format must have FP8 elements, got {high_format.name}")

    x_sm = softmax_prescale(x) if is_query else x

    # Quantization scale: stretch each group onto the two-level range.
    gmax = _group_max(np.abs(x_sm), granularity)
    s_q = np.where(gmax > 0, gmax / QUANT_RANGE, 1.0)
    x_scaled = x_sm / _per_column(s_q, cols)

    # 4-bit path.
    low_src = x_scaled if low_format.two_level else x_sm
    v1 = low_format.block_size
    blocks = low_src.reshape(rows, cols // v1, v1)
    bmax = np.abs(blocks).max(axis=2)
    if low_format.scale_kind.value == "e4m3":
        scale_codes = encode_fp8(np.where(bmax > 0, bmax / low_format.element.upper, 1.0), E4M3)
        scale_vals = decode_fp8(scale_codes, E4M3)
        tiny = (scale_vals == 0) & (bmax > 0)
        if np.any(tiny):
            scale_vals = np.where(tiny, _E4M3_MIN_SUBNORMAL, scale_vals)
            scale_codes = np.where(tiny, encode_fp8(_E4M3_MIN_SUBNORMAL, E4M3), scale_codes)
        scales_low = scale_codes
    else:
        exp = np.where(
            bmax > 0,
            np.clip(_floor_log2(np.maximum(bmax, np.finfo(np.float64).tiny))
                    - low_format.element.e_max, -E8M0_BIAS, E8M0_BIAS),
            -E8M0_BIAS,
        )
        scales_low = (exp + E8M0_BIAS).astype(np.uint8)
        scale_vals = e8m0_decode(scales_low)
    bound = low_format.element.upper
    low_vals = np.clip(blocks / scale_vals[:, :, None], -bound, bound)
    fp4_codes = encode_e2m1(low_vals).reshape(rows, cols)
    flat = pack_fp4(fp4_codes)
    packed_low = PackedFp4Buffer(
        bytes_=flat.bytes_.reshape(rows, cols // 2), logical_len=flat.logical_len
    )

    # 8-bit path.
    v2 = high_format.block_size
    hblocks = x_scaled.reshape(rows, cols // v2, v2)
    hmax = np.abs(hblocks).max(axis=2)
    hexp = np.where(
        hmax > 0,
        np.clip(_floor_log2(np.maximum(hmax, np.finfo(np.float64).tiny))
                - high_format.element.e_max, -E8M0_BIAS, E8M0_BIAS),
        -E8M0_BIAS,
    )
    scales_high = (hexp + E8M0_BIAS).astype(np.uint8)
    hbound = high_format.element.upper
    high_vals = np.clip(hblocks / np.exp2(hexp)[:, :, None], -hbound, hbound)
    high_codes = encode_fp8(high_vals, high_format.element).reshape(rows, cols)

    return DualQuantizedTensor(
        shape=(rows, cols),
        low_format=low_format,
        high_format=high_format,
        granularity=granularity,
        packed_low=packed_low,
        scales_low=scales_low,
        high_codes=high_codes,
        scales_high=scales_high,
        quant_scale=s_q,
        softmax_prescaled=is_query,
    )


def dequantize_low(t: DualQuantizedTensor) -> np.ndarray:
    """Reconstruct the tensor seen by the 4-bit path, in working precision."""
    rows, cols = t.shape
    codes = unpack_fp4(
        PackedFp4Buffer(bytes_=t.packed_low.bytes_.ravel(), logical_len=t.packed_low.logical_len)
    ).reshape(rows, cols)
    elems = decode_e2m1(codes)
    if t.low_format.scale_kind.value == "e4m3":
        scale = decode_fp8(t.scales_low, E4M3)
    else:
        scale = e8m0_decode(t.scales_low)
    out = elems * _per_column(scale, cols)
    if t.low_format.two_level:
        out = out * _per_column(t.quant_scale, cols)
    return out


def dequantize_high(t: DualQuantizedTensor) -> np.ndarray:
    """Reconstruct the tensor seen by the 8-bit path, in working precision."""
    rows, cols = t.shape
    elems = decode_fp8(t.high_codes, t.high_format.element)
    out = elems * _per_column(e8m0_decode(t.scales_high), cols)
    return out * _per_column(t.quant_scale, cols)
