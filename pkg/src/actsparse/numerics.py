"""Shared numeric primitives: column norms, rank thresholds, softmax, KL, MSE.

Storage is 32-bit; reductions run in 64-bit so results are stable enough to
compare against naive oracles.
"""

from __future__ import annotations

import numpy as np

# Floor applied to the second argument of kl_divergence before the log, so a
# sparse model that zeroes a token's probability still yields a finite value.
KL_FLOOR = 1e-10


def column_l2_norms(w: np.ndarray) -> np.ndarray:
    """L2 norm of each column of a 2-D matrix."""
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={w.ndim}")
    return np.sqrt(np.sum(w.astype(np.float64) ** 2, axis=0)).astype(np.float32)


def kth_largest_threshold(values: np.ndarray, keep_ratio: float) -> float:
    """Nearest-rank threshold keeping round(keep_ratio * n) of `values`.

    Returns the k-th largest value with k = round(keep_ratio * n), so that
    exactly k entries satisfy v >= tau when values are distinct (duplicates can
    inflate the kept count, since the mask rule downstream is >=).  keep_ratio
    of 1 returns -inf (keep all); a ratio that rounds k to 0 returns +inf
    (keep nothing).
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty score population")
    if not 0.0 <= keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in [0, 1], got {keep_ratio}")
    if keep_ratio >= 1.0:
        return float("-inf")
    k = int(round(keep_ratio * v.size))
    if k == 0:
        return float("inf")
    if k >= v.size:
        return float(v.min())
    return float(np.partition(v, v.size - k)[v.size - k])


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats; q is floored at KL_FLOOR, p==0 terms contribute 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    q = np.maximum(q, KL_FLOOR)
    terms = np.where(p > 0.0, p * (np.log(np.maximum(p, KL_FLOOR)) - np.log(q)), 0.0)
    return float(terms.sum())


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p_i || q_i) for stacked distributions (last axis = support)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), KL_FLOOR)
    terms = np.where(p > 0.0, p * (np.log(np.maximum(p, KL_FLOOR)) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))
