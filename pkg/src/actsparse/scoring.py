"""Weight-aware channel importance scores, masks, and threshold calibration.

A channel's score is |x_i| * g_i**alpha where g_i is the L2 norm of the weight
column it feeds.  alpha = 0 degenerates to plain activation-magnitude
sparsity.  Thresholds are fitted once, offline, from a score population pooled
over all calibration tokens and channels of a layer; masks still vary per
token because the scores depend on the token's activations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import ChannelMask, MacCounter, sparse_matvec
from .numerics import column_l2_norms, kth_largest_threshold

# Column norms are clamped here before exponentiation so a zero-norm column
# cannot produce a 0**0 ambiguity.
NORM_CLAMP = 1e-4


def col_norm_powers(col_norms: np.ndarray, alpha: float) -> np.ndarray:
    """clamp(g, NORM_CLAMP) ** alpha, per channel."""
    g = np.clip(np.asarray(col_norms, dtype=np.float64), NORM_CLAMP, None)
    return np.power(g, alpha).astype(np.float32)


@dataclass
class SparsityState:
    """Everything a projection site needs to mask its input at inference."""

    alpha: float
    threshold: float
    keep_ratio: float
    col_norm_pow: np.ndarray

    @classmethod
    def for_layer(
        cls, w: np.ndarray, alpha: float, keep_ratio: float, threshold: float
    ) -> "SparsityState":
        return cls(
            alpha=float(alpha),
            threshold=float(threshold),
            keep_ratio=float(keep_ratio),
            col_norm_pow=col_norm_powers(column_l2_norms(w), alpha),
        )

    @classmethod
    def keep_all(cls, n_channels: int) -> "SparsityState":
        return cls(0.0, float("-inf"), 1.0, np.ones(n_channels, dtype=np.float32))


def compute_scores(x: np.ndarray, state: SparsityState) -> np.ndarray:
    """s_i = |x_i| * col_norm_pow_i; accepts a vector or [tokens, n] matrix."""
    x = np.asarray(x)
    if x.shape[-1] != state.col_norm_pow.size:
        raise ValueError(
            f"length mismatch: x has {x.shape[-1]} channels, "
            f"state has {state.col_norm_pow.size}"
        )
    return np.abs(x) * state.col_norm_pow


def build_mask(scores: np.ndarray, threshold: float) -> ChannelMask:
    return ChannelMask(np.asarray(scores) >= threshold)


def calibrate_threshold(score_population: np.ndarray, keep_ratio: float) -> float:
    """Fit the layer threshold from a pooled calibration score population."""
    pool = np.asarray(score_population).ravel()
    if pool.size == 0:
        raise ValueError("empty score population")
    return kth_largest_threshold(pool, keep_ratio)


def apply_sparse_projection(
    x: np.ndarray,
    w: np.ndarray,
    state: SparsityState,
    counter: MacCounter | None = None,
) -> np.ndarray:
    """Score, mask, then gather-multiply one input vector."""
    scores = compute_scores(x, state)
    mask = build_mask(scores, state.threshold)
    return sparse_matvec(x, w, mask, counter=counter)
