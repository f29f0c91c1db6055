"""Block-wise grid search for per-layer weight exponents and threshold fixing.

The exponent search is coordinate descent over the block's seven projections
in a fixed order; each layer's candidates are exhaustively gridded while the
other layers keep their current (alpha, threshold).  The candidate threshold
is refitted at every alpha from the pooled calibration scores, so the MSE
objective always sees the full sparse block.  Descent repeats until no layer
changes, which guarantees each returned alpha is the grid argmin at the final
configuration of the others.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import LAYER_NAMES, Block, ModelConfig, ToyTransformer, block_forward
from .numerics import column_l2_norms
from .scoring import SparsityState, calibrate_threshold, col_norm_powers


@dataclass
class AlphaGrid:
    lo: float = 0.0
    hi: float = 1.5
    step: float = 0.05

    def __post_init__(self):
        if self.lo > self.hi or self.step <= 0:
            raise ValueError(f"invalid alpha grid [{self.lo}, {self.hi}] step {self.step}")

    def candidates(self) -> np.ndarray:
        n = int(round((self.hi - self.lo) / self.step))
        return np.round(self.lo + self.step * np.arange(n + 1), 10)


@dataclass
class BlockCalibCache:
    """Dense activations captured at one block during calibration.

    seq_inputs / seq_dense_out keep per-sequence segmentation (attention must
    not mix sequences); layer_inputs pools every projection's input rows
    across sequences for score-population fitting.
    """

    seq_inputs: list[np.ndarray]
    seq_dense_out: list[np.ndarray]
    layer_inputs: dict[str, np.ndarray]

    @property
    def token_count(self) -> int:
        return sum(x.shape[0] for x in self.seq_inputs)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.seq_inputs:
            raise ValueError("empty calibration cache")
        return np.stack(self.seq_inputs), np.stack(self.seq_dense_out)


def layer_threshold(
    layer_x: np.ndarray, col_norms: np.ndarray, alpha: float, keep_ratio: float
) -> float:
    """Fit tau from the pooled |x| * g**alpha scores of one layer."""
    if keep_ratio >= 1.0:
        return float("-inf")
    if keep_ratio <= 0.0:
        return float("inf")
    scores = np.abs(layer_x) * col_norm_powers(col_norms, alpha)
    return calibrate_threshold(scores, keep_ratio)


def _block_sse(block: Block, config: ModelConfig, x3, dense_out, states) -> float:
    y = block_forward(block, x3, config, states=states)
    diff = (y.astype(np.float64) - dense_out.astype(np.float64)).ravel()
    return float(diff @ diff)


@dataclass
class AlphaSearchResult:
    alphas: dict[str, float]
    block_sse: float
    passes: int
    history: list[tuple[str, float, float]] = field(default_factory=list)


def search_alpha_block(
    block: Block,
    config: ModelConfig,
    cache: BlockCalibCache,
    keep_ratios: dict[str, float],
    grid: AlphaGrid,
    max_passes: int = 8,
) -> AlphaSearchResult:
    """Per-layer exponents minimizing the block's sparse-output squared error.

    Ties break toward the smaller alpha.  Terminates at a fixed point: the
    (error, sum-of-alphas) pair strictly decreases on every accepted change.
    """
    x3, dense_out = cache.stacked()
    col_norms = {name: column_l2_norms(block.weights[name]) for name in LAYER_NAMES}
    candidates = grid.candidates()

    state_memo: dict[tuple[str, float], SparsityState] = {}

    def state_at(name: str, alpha: float) -> SparsityState:
        key = (name, float(alpha))
        if key not in state_memo:
            r = keep_ratios[name]
            tau = layer_threshold(cache.layer_inputs[name], col_norms[name], alpha, r)
            state_memo[key] = SparsityState(
                alpha=float(alpha),
                threshold=tau,
                keep_ratio=float(r),
                col_norm_pow=col_norm_powers(col_norms[name], alpha),
            )
        return state_memo[key]

    alphas = {name: float(candidates[0]) for name in LAYER_NAMES}
    states = {name: state_at(name, alphas[name]) for name in LAYER_NAMES}
    history: list[tuple[str, float, float]] = []
    current_sse = _block_sse(block, config, x3, dense_out, states)
    passes = 0
    for _ in range(max_passes):
        passes += 1
        changed = False
        for name in LAYER_NAMES:
            best_alpha, best_sse = None, np.inf
            for a in candidates:
                trial = dict(states)
                trial[name] = state_at(name, a)
                sse = _block_sse(block, config, x3, dense_out, trial)
                if sse < best_sse:  # strict: ties keep the earlier (smaller) alpha
                    best_alpha, best_sse = float(a), sse
            if best_alpha != alphas[name]:
                changed = True
            alphas[name] = best_alpha
            states[name] = state_at(name, best_alpha)
            current_sse = best_sse
            history.append((name, best_alpha, best_sse))
        if not changed:
            break
    return AlphaSearchResult(alphas=alphas, block_sse=current_sse, passes=passes, history=history)


def fix_thresholds(
    model: ToyTransformer,
    keep_ratios: list[dict[str, float]],
    alphas: list[dict[str, float]],
    caches: list[BlockCalibCache],
) -> list[dict[str, SparsityState]]:
    """Final per-layer thresholds at the calibrated exponents.

    Returns the full inference-ready sparsity states, one dict per block.
    """
    if len(caches) != model.config.n_blocks:
        raise ValueError("one calibration cache required per block")
    states = []
    for b, block in enumerate(model.blocks):
        per_layer = {}
        for name in LAYER_NAMES:
            if name not in caches[b].layer_inputs:
                raise ValueError(f"block {b}: missing cached activations for {name}")
            g = column_l2_norms(block.weights[name])
            a = alphas[b][name]
            r = keep_ratios[b][name]
            per_layer[name] = SparsityState(
                alpha=float(a),
                threshold=layer_threshold(caches[b].layer_inputs[name], g, a, r),
                keep_ratio=float(r),
                col_norm_pow=col_norm_powers(g, a),
            )
        states.append(per_layer)
    return states
