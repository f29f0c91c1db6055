"""Dense and gather-compressed sparse matvec kernels plus MAC accounting.

The convention throughout is y = x @ W.T with W stored row-major as
[out_features, in_features]; a channel mask selects input features (columns of
W).  MACs are counted analytically (rows x kept) rather than by instrumenting
the arithmetic.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


@dataclass
class ChannelMask:
    """Boolean keep-mask over the input channels of one projection."""

    bits: np.ndarray
    kept_count: int = field(init=False)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).ravel()
        self.kept_count = int(self.bits.sum())

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def __len__(self) -> int:
        return self.bits.size


@dataclass
class MacCounter:
    """Analytic multiply-accumulate tally; executed <= dense by construction."""

    dense_macs: int = 0
    executed_macs: int = 0

    def add_dense(self, rows: int, cols: int) -> None:
        self.dense_macs += rows * cols

    def add_executed(self, rows: int, kept: int) -> None:
        self.executed_macs += rows * kept

    def add_site(self, tokens: int, rows: int, cols: int, kept_total: int) -> None:
        """Account one projection site over `tokens` inputs.

        kept_total is summed over tokens; a dense site passes tokens * cols.
        """
        self.dense_macs += tokens * rows * cols
        self.executed_macs += rows * kept_total


def mac_ratio(counter: MacCounter) -> float:
    if counter.dense_macs == 0:
        raise ValueError("no dense MACs recorded")
    return counter.executed_macs / counter.dense_macs


def dense_matvec(x: np.ndarray, w: np.ndarray, counter: MacCounter | None = None) -> np.ndarray:
    """y = x @ W.T for a single input vector, 64-bit row accumulation."""
    x = np.asarray(x)
    w = np.asarray(w)
    if w.ndim != 2 or x.ndim != 1 or x.size != w.shape[1]:
        raise ValueError(f"shape mismatch: x {x.shape} vs W {w.shape}")
    y = w.astype(np.float64) @ x.astype(np.float64)
    if counter is not None:
        counter.add_dense(w.shape[0], w.shape[1])
    return y.astype(np.float32)


def sparse_matvec(
    x: np.ndarray, w: np.ndarray, mask: ChannelMask, counter: MacCounter | None = None
) -> np.ndarray:
    """Gather-form sparse matvec: only kept columns of W are touched.

    Equivalent (to accumulation tolerance) to dense_matvec(x * mask, W).
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if w.ndim != 2 or x.ndim != 1 or x.size != w.shape[1] or len(mask) != w.shape[1]:
        raise ValueError(f"shape mismatch: x {x.shape}, W {w.shape}, mask {len(mask)}")
    idx = mask.indices()
    y = w[:, idx].astype(np.float64) @ x[idx].astype(np.float64)
    if counter is not None:
        counter.add_executed(w.shape[0], mask.kept_count)
    return y.astype(np.float32)


if _HAVE_NUMBA:

    @njit(cache=True, fastmath=True)
    def _gather_matvec_packed(wt, x, idx, out):
        # wt is W.T, contiguous [in_features, out_features]; streaming kept rows
        # keeps the access pattern cache friendly.
        out[:] = 0.0
        for j in idx:
            xv = x[j]
            row = wt[j]
            for r in range(row.size):
                out[r] += xv * row[r]


def _numpy_gather_matvec(wt, x, idx, out):
    np.dot(x[idx], wt[idx], out=out)


def bench_matvec(
    rows: int,
    cols: int,
    sparsity_grid,
    iters: int = 100,
    seed: int = 0,
) -> list[dict]:
    """Time the gather kernel at each sparsity level on one shared (W, x).

    Returns one record per grid point: sparsity, median ns/op, and effective
    GMAC/s.  The weight matrix is packed transposed once so that kept-channel
    gathers stream contiguous rows.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    for s in sparsity_grid:
        if not 0.0 <= s < 1.0:
            raise ValueError(f"sparsity grid entries must lie in [0, 1), got {s}")
    rng = np.random.default_rng(seed)
    wt = np.ascontiguousarray(rng.standard_normal((cols, rows)).astype(np.float32))
    x = rng.standard_normal(cols).astype(np.float32)
    out = np.empty(rows, dtype=np.float32)
    kernel = _gather_matvec_packed if _HAVE_NUMBA else _numpy_gather_matvec

    results = []
    for s in sparsity_grid:
        kept = cols - int(round(s * cols))
        idx = np.sort(rng.choice(cols, size=kept, replace=False)).astype(np.int64)
        kernel(wt, x, idx, out)  # warm-up (and numba compile on first call)
        kernel(wt, x, idx, out)
        samples = []
        for _ in range(max(iters, 100)):
            t0 = time.perf_counter_ns()
            kernel(wt, x, idx, out)
            samples.append(time.perf_counter_ns() - t0)
        ns = statistics.median(samples)
        results.append(
            {
                "sparsity": float(s),
                "ns_per_op": float(ns),
                "gmacs_per_s": rows * kept / ns if ns > 0 else float("inf"),
            }
        )
    return results


def write_bench_csv(path, results: list[dict], provenance: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {provenance}\n")
        writer = csv.writer(fh)
        writer.writerow(["sparsity", "ns_per_op", "gmacs_per_s"])
        for row in results:
            writer.writerow([row["sparsity"], row["ns_per_op"], row["gmacs_per_s"]])
