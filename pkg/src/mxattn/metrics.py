"""Error metrics between reference and quantized tensors, plus the
accounting of how much of the attention matrix ran in high precision."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, causal_tile_plan, noncausal_tile_plan

__all__ = ["MetricReport", "similarity", "high_precision_fraction"]


@dataclass
class MetricReport:
    """Similarity metrics for one (reference, test) tensor pair.

    ``psnr`` is 20 log10(max|ref| / rmse) in dB, +inf when the tensors
    are identical.  The context fields are filled in by the experiment
    harness; bare :func:`similarity` calls leave them None.
    """

    cos_sim: float
    rel_l1: float
    abs_l1: float
    rmse: float
    psnr: float
    high_precision_pct: float | None = None
    seed: int | None = None
    config_echo: dict | None = None


def similarity(ref, test) -> MetricReport:
    """Cosine similarity, relative/absolute L1, RMSE and PSNR over
    flattened tensors.  The reference must contain at least one nonzero."""
    ref = np.asarray(ref, dtype=np.float64).ravel()
    test = np.asarray(test, dtype=np.float64).ravel()
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    ref_norm = np.linalg.norm(ref)
    if ref_norm == 0:
        raise ValueError("metrics are undefined for an all-zero reference")
    test_norm = np.linalg.norm(test)
    cos = float(ref @ test / (ref_norm * test_norm)) if test_norm > 0 else 0.0
    abs_l1 = float(np.abs(ref - test).sum())
    rel_l1 = abs_l1 / float(np.abs(ref).sum())
    rmse = float(np.sqrt(np.mean((ref - test) ** 2)))
    peak = float(np.abs(ref).max())
    psnr = math.inf if rmse == 0 else 20.0 * math.log10(peak / rmse)
    return MetricReport(cos_sim=cos, rel_l1=rel_l1, abs_l1=abs_l1, rmse=rmse, psnr=psnr)


def high_precision_fraction(
    len_q: int,
    len_k: int,
    tile_m: int,
    tile_n: int,
    diag_window: int,
    sink_window: int,
    causal: bool,
) -> float:
    """Fraction of attention-score entries the engine computes with the
    high-precision operands (restricted to the causal region when causal).

    Follows the engine's tile plans exactly; an O(L^2) per-cell count
    gives the same number.
    """
    cfg = AttentionConfig(
        tile_m=tile_m,
        tile_n=tile_n,
        diag_window=diag_window,
        sink_window=sink_window,
        causal=causal,
    )
    plan_fn = causal_tile_plan if causal else noncausal_tile_plan
    high_cells = 0
    valid_cells = 0
    n_qtiles = -(-len_q // tile_m)
    for q_tile in range(n_qtiles):
        q0 = q_tile * tile_m
        q1 = min(q0 + tile_m, len_q)
        # One high/low label per key position, shared by every row of the
        # query tile.
        high_key = np.zeros(len_k, dtype=bool)
        for key_tile, high in plan_fn(q_tile, len_q, len_k, cfg):
            if high:
                high_key[key_tile * tile_n : min((key_tile + 1) * tile_n, len_k)] = True
        if causal:
            cum_high = np.cumsum(high_key)
            rows = np.arange(q0, q1)
            kmax = np.minimum(rows, len_k - 1)
            high_cells += int(cum_high[kmax].sum())
            valid_cells += int((kmax + 1).sum())
        else:
            high_cells += int(high_key.sum()) * (q1 - q0)
            valid_cells += len_k * (q1 - q0)
    if valid_cells == 0:
        return 0.0
    return high_cells / valid_cells
