"""Tiled attention with per-tile precision assignment.

Three layers:

* a dense full-precision reference (the oracle everything is checked
  against);
* the streaming-softmax recurrence over key/value tiles (running max,
  running normalizer, unnormalized accumulator);
* the mixed-precision engine: queries/keys are quantized once into
  paired 4-bit / 8-bit representations, then each (query tile, key tile)
  pair is computed from either the low or the high dequantized operands.
  Key tiles inside a diagonal window ahead of each query tile, and the
  first "sink" key tiles, use the high path; everything else uses the
  low path.

Scores are computed in base 2 (queries carry a folded log2(e)/sqrt(D)
factor), which changes nothing mathematically but mirrors how the
pipeline exponentiates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formats import MxFormatSpec, MXFP8_E4M3, NVFP4
from .quantize import (
    Granularity,
    dequantize_high,
    dequantize_low,
    quantize_dual,
    softmax_prescale,
)

__all__ = [
    "AttentionConfig",
    "OnlineSoftmaxState",
    "reference_attention",
    "reference_scores",
    "online_softmax_update",
    "apply_causal_mask",
    "causal_tile_plan",
    "noncausal_tile_plan",
    "mixed_precision_attention",
    "mixed_precision_scores",
]


@dataclass(frozen=True)
class AttentionConfig:
    """Tiling, window and precision configuration for the engine.

    ``diag_window`` (tokens) promotes the key tiles nearest the diagonal
    to the high-precision path; ``sink_window`` (tokens) promotes the
    first key tiles of the sequence.  Both must be multiples of
    ``tile_n``.  ``low_format=None`` / ``high_format=None`` disables
    quantization on that path (identity passthrough).
    """

    tile_m: int = 64
    tile_n: int = 64
    diag_window: int = 0
    sink_window: int = 0
    causal: bool = True
    low_format: MxFormatSpec | None = NVFP4
    high_format: MxFormatSpec | None = MXFP8_E4M3
    granularity: Granularity = Granularity.TOKEN

    def __post_init__(self):
        if self.tile_m < 1 or self.tile_n < 1:
            raise ValueError("tile sizes must be >= 1")
        if self.diag_window < 0 or self.sink_window < 0:
            raise ValueError("window sizes must be >= 0")
        if self.diag_window % self.tile_n or self.sink_window % self.tile_n:
            raise ValueError(
                "diag_window and sink_window must be multiples of tile_n "
                f"(got {self.diag_window}/{self.sink_window} with tile_n={self.tile_n})"
            )


@dataclass
class OnlineSoftmaxState:
    """Streaming softmax accumulator for one query tile.

    ``m`` is the running row maximum, ``l`` the running normalizer and
    ``o`` the unnormalized output; ``normalized(state)`` equals softmax
    attention restricted to the key tiles folded in so far.
    """

    m: np.ndarray
    l: np.ndarray
    o: np.ndarray

    @classmethod
    def fresh(cls, rows: int, head_dim: int) -> "OnlineSoftmaxState":
        return cls(
            m=np.full(rows, -np.inf),
            l=np.zeros(rows),
            o=np.zeros((rows, head_dim)),
        )

    def normalized(self) -> np.ndarray:
        l = np.where(self.l > 0, self.l, 1.0)
        return self.o / l[:, None]


def _check_qkv(q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("Q, K, V must be 2-D matrices")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"head dim mismatch: Q {q.shape} vs K {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"K/V row mismatch: {k.shape} vs {v.shape}")
    if causal and q.shape[0] != k.shape[0]:
        raise ValueError(
            f"causal attention requires equal sequence lengths, got {q.shape[0]} and {k.shape[0]}"
        )


def reference_attention(q, k, v, causal: bool = False) -> np.ndarray:
    """Dense softmax(Q K^T / sqrt(D)) V in working precision."""
    p = reference_scores(q, k, causal)
    return p @ np.asarray(v, dtype=np.float64)


def reference_scores(q, k, causal: bool = False) -> np.ndarray:
    """Dense post-softmax attention probabilities (the reference for score metrics)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_qkv(q, k, k, causal)
    logits = q @ k.T / math.sqrt(q.shape[1])
    if causal:
        lq = q.shape[0]
        logits = np.where(np.arange(lq)[:, None] >= np.arange(lq)[None, :], logits, -np.inf)
    return _softmax_rows(logits, base2=False)


def _softmax_rows(logits: np.ndarray, base2: bool) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    z = logits - m
    p = np.exp2(z) if base2 else np.exp(z)
    p[~np.isfinite(logits)] = 0.0
    denom = p.sum(axis=1, keepdims=True)
    return p / np.where(denom > 0, denom, 1.0)


def online_softmax_update(
    state: OnlineSoftmaxState,
    scores: np.ndarray,
    v_tile: np.ndarray,
    base2: bool = False,
) -> OnlineSoftmaxState:
    """Fold one tile of scores and values into the running state.

    Rows whose scores are all -inf (fully masked tiles) pass through
    unchanged.  With ``base2`` the exponentials are 2^x instead of e^x.
    """
    exp = np.exp2 if base2 else np.exp
    tile_max = scores.max(axis=1)
    m_new = np.maximum(state.m, tile_max)
    live = np.isfinite(m_new)
    # alpha rescales the accumulated state onto the new maximum; dead rows
    # (nothing seen yet, nothing in this tile) keep alpha = 1.
    alpha = np.where(live, exp(np.where(live, state.m - m_new, 0.0)), 1.0)
    p = np.zeros_like(scores)
    finite = np.isfinite(scores)
    p[finite] = exp((scores - np.where(live, m_new, 0.0)[:, None])[finite])
    return OnlineSoftmaxState(
        m=m_new,
        l=state.l * alpha + p.sum(axis=1),
        o=state.o * alpha[:, None] + p @ v_tile,
    )


def apply_causal_mask(scores: np.ndarray, query_start: int, key_start: int) -> np.ndarray:
    """Set score (a, b) to -inf wherever global query position
    query_start + a precedes global key position key_start + b."""
    rows, cols = scores.shape
    qpos = query_start + np.arange(rows)[:, None]
    kpos = key_start + np.arange(cols)[None, :]
    return np.where(qpos >= kpos, scores, -np.inf)


# Tile plans: the per-query-tile schedule of (key tile index, high?) pairs.
# Shared by the engine, the score-matrix evaluator and the
# high-precision-fraction accounting so all three agree exactly.

def causal_tile_plan(
    q_tile: int, len_q: int, len_k: int, cfg: AttentionConfig
) -> list[tuple[int, bool]]:
    """Key-tile schedule for one causal query tile.

    Sink tiles come first with high precision, then the low-precision
    span, then the high-precision diagonal window running up to the last
    key tile the query tile may attend to.
    """
    q0 = q_tile * cfg.tile_m
    q1 = min(q0 + cfg.tile_m, len_q) - 1
    n_needed = min(-(-(q1 + 1) // cfg.tile_n), -(-len_k // cfg.tile_n))
    sink_t = min(cfg.sink_window // cfg.tile_n, n_needed)
    hi_start = -(-(q0 - cfg.diag_window) // cfg.tile_n)
    hi_start = min(max(hi_start, sink_t), n_needed)
    plan = [(i, True) for i in range(sink_t)]
    plan += [(i, False) for i in range(sink_t, hi_start)]
    plan += [(i, True) for i in range(hi_start, n_needed)]
    return plan


def noncausal_tile_plan(
    q_tile: int, len_q: int, len_k: int, cfg: AttentionConfig
) -> list[tuple[int, bool]]:
    """Key-tile schedule for one non-causal query tile.

    Low precision covers two disjoint spans (before and after the
    diagonal window, visited in that order), then the window itself is
    processed in high precision.  Sink tiles are promoted to high
    precision wherever they fall.
    """
    q0 = q_tile * cfg.tile_m
    n_tiles = -(-len_k // cfg.tile_n)
    sink_t = min(cfg.sink_window // cfg.tile_n, n_tiles)
    half = cfg.diag_window / 2
    d0 = int(np.clip(math.ceil((q0 - half) / cfg.tile_n), 0, n_tiles))
    d1 = int(np.clip(math.ceil((q0 + half) / cfg.tile_n), d0, n_tiles))
    if cfg.diag_window >= 2 * len_k:
        d0, d1 = 0, n_tiles
    plan = [(i, i < sink_t) for i in range(0, d0)]
    plan += [(i, i < sink_t) for i in range(d1, n_tiles)]
    plan += [(i, True) for i in range(d0, d1)]
    return plan


@dataclass
class _Operands:
    """Dequantized low/high copies of Q and K (base-2 logit domain) plus V."""

    q_low: np.ndarray
    q_high: np.ndarray
    k_low: np.ndarray
    k_high: np.ndarray
    v: np.ndarray


def _prepare_operands(q, k, v, cfg: AttentionConfig) -> _Operands:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_qkv(q, k, v, cfg.causal)
    if (cfg.low_format or cfg.high_format) and q.shape[1] % 32 != 0:
        raise ValueError(f"head dim {q.shape[1]} not divisible by 32")

    def both(x, is_query):
        if cfg.low_format is None and cfg.high_format is None:
            ident = softmax_prescale(x) if is_query else x
            return ident, ident
        high_fmt = cfg.high_format or MXFP8_E4M3
        if cfg.low_format is None or cfg.low_format.element.bits == 8:
            # A dedicated FP8 "low" path is just the high path; reuse it.
            low_fmt = NVFP4
        else:
            low_fmt = cfg.low_format
        t = quantize_dual(x, is_query=is_query, low_format=low_fmt,
                          high_format=high_fmt, granularity=cfg.granularity)
        high = dequantize_high(t) if cfg.high_format is not None else (
            softmax_prescale(x) if is_query else x)
        if cfg.low_format is None:
            low = softmax_prescale(x) if is_query else x
        elif cfg.low_format.element.bits == 8:
            low = high
        else:
            low = dequantize_low(t)
        return low, high

    q_low, q_high = both(q, True)
    k_low, k_high = both(k, False)
    return _Operands(q_low, q_high, k_low, k_high, v)


def mixed_precision_attention(q, k, v, cfg: AttentionConfig) -> np.ndarray:
    """Tiled attention where each key tile uses low- or high-precision operands.

    Quantization happens once up front; per tile the score block is the
    exact matmul of the dequantized operands (scaled low-bit accumulation
    and this are identical in exact arithmetic).  Returns len(Q) x D.
    """
    ops = _prepare_operands(q, k, v, cfg)
    len_q, head_dim = ops.q_low.shape
    len_k = ops.k_low.shape[0]
    plan_fn = causal_tile_plan if cfg.causal else noncausal_tile_plan
    out = np.empty((len_q, ops.v.shape[1]))

    n_qtiles = -(-len_q // cfg.tile_m)
    for q_tile in range(n_qtiles):
        q0 = q_tile * cfg.tile_m
        q1 = min(q0 + cfg.tile_m, len_q)
        state = OnlineSoftmaxState.fresh(q1 - q0, ops.v.shape[1])
        for key_tile, high in plan_fn(q_tile, len_q, len_k, cfg):
            k0 = key_tile * cfg.tile_n
            k1 = min(k0 + cfg.tile_n, len_k)
            qt = (ops.q_high if high else ops.q_low)[q0:q1]
            kt = (ops.k_high if high else ops.k_low)[k0:k1]
            scores = qt @ kt.T
            if cfg.causal and k1 - 1 > q0:
                scores = apply_causal_mask(scores, q0, k0)
            state = online_softmax_update(state, scores, ops.v[k0:k1], base2=True)
        out[q0:q1] = state.normalized()
    return out


def mixed_precision_scores(q, k, cfg: AttentionConfig) -> np.ndarray:
    """Dense post-softmax probabilities under the same per-tile precision
    assignment as :func:`mixed_precision_attention` (for error metrics)."""
    ops = _prepare_operands(q, k, np.asarray(k, dtype=np.float64), cfg)
    len_q = ops.q_low.shape[0]
    len_k = ops.k_low.shape[0]
    plan_fn = causal_tile_plan if cfg.causal else noncausal_tile_plan
    # Blocks the causal plan never visits are fully masked.
    logits = np.full((len_q, len_k), -np.inf)
    n_qtiles = -(-len_q // cfg.tile_m)
    for q_tile in range(n_qtiles):
        q0 = q_tile * cfg.tile_m
        q1 = min(q0 + cfg.tile_m, len_q)
        for key_tile, high in plan_fn(q_tile, len_q, len_k, cfg):
            k0 = key_tile * cfg.tile_n
            k1 = min(k0 + cfg.tile_n, len_k)
            qt = (ops.q_high if high else ops.q_low)[q0:q1]
            kt = (ops.k_high if high else ops.k_low)[k0:k1]
            block = qt @ kt.T
            if cfg.causal:
                block = apply_causal_mask(block, q0, k0)
            logits[q0:q1, k0:k1] = block
    return _softmax_rows(logits, base2=True)
