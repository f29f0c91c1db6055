"""Mixed-granularity sparsity allocation.

Coarse stage: an evolutionary search distributes a global sparsity budget
across blocks (mutation only, no crossover), scored by token-averaged KL from
the dense model's next-token distributions.  Fine stage: a greedy loop
distributes each block's budget across its layers by smallest increase in
block output reconstruction error.  Both stages run with the weight exponent
fixed at zero; exponent calibration happens afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibrate import BlockCalibCache, layer_threshold
from .model import LAYER_NAMES, Block, ModelConfig, ToyTransformer, block_forward, model_forward_batch
from .numerics import column_l2_norms, kl_rows, softmax
from .scoring import SparsityState, col_norm_powers


@dataclass
class EvoParams:
    generations: int = 400
    offspring_per_gen: int = 64
    mutation_step: float = 0.005
    mutable_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.generations < 0 or self.offspring_per_gen < 1:
            raise ValueError("generations must be >= 0 and offspring >= 1")
        if self.mutation_step <= 0 or not 0 < self.mutable_fraction <= 1:
            raise ValueError("invalid mutation parameters")


@dataclass
class BlockAllocation:
    p: np.ndarray  # per-block sparsity fractions
    p_target: float
    gen: int = 0

    def copy(self) -> "BlockAllocation":
        return BlockAllocation(self.p.copy(), self.p_target, self.gen)


@dataclass
class LayerAllocation:
    sparsity: dict[str, float]
    budget: float


@dataclass
class GreedyStep:
    step: int
    chosen: str
    chosen_error: float
    errors: dict[str, float]  # every alternative evaluated this step


def weighted_average(p: np.ndarray, weights: np.ndarray) -> float:
    return float(np.dot(p, weights) / weights.sum())


def block_param_counts(model: ToyTransformer) -> np.ndarray:
    return np.array([b.param_count() for b in model.blocks], dtype=np.float64)


def mutate_candidate(
    parent: BlockAllocation,
    params: EvoParams,
    rng: np.random.Generator,
    weights: np.ndarray,
) -> BlockAllocation:
    """Localized mutation plus repair.

    floor(N * mutable_fraction) blocks (minimum 1, chosen with replacement)
    are incremented by the step size; while the weighted average exceeds the
    target, a random non-zero block is decremented.  Each decrement strictly
    reduces the average, so repair terminates.
    """
    p = parent.p.copy()
    n = p.size
    eps = params.mutation_step
    flips = max(1, int(n * params.mutable_fraction))
    for _ in range(flips):
        b = int(rng.integers(n))
        p[b] = min(1.0, p[b] + eps)
    wsum = weights.sum()
    while np.dot(p, weights) / wsum > parent.p_target + 1e-12:
        nonzero = np.flatnonzero(p > 0)
        b = int(nonzero[rng.integers(nonzero.size)])
        p[b] = max(0.0, p[b] - eps)
    return BlockAllocation(p, parent.p_target, parent.gen + 1)


class AllocationScorer:
    """Evaluates block allocations by KL to the cached dense distributions.

    Thresholds for a trial keep ratio are refitted (alpha = 0) from the
    pooled calibration scores of each layer and memoized per (block, layer,
    ratio), since evolutionary candidates revisit the same grid values.
    """

    def __init__(
        self,
        model: ToyTransformer,
        calib_ids: np.ndarray,  # [S, T]
        caches: list[BlockCalibCache],
        dense_logits: np.ndarray,  # [S, T, vocab]
    ):
        if calib_ids.ndim != 2 or calib_ids.shape[0] == 0:
            raise ValueError("empty calibration set")
        self.model = model
        self.calib_ids = calib_ids
        self.caches = caches
        self.dense_probs = softmax(dense_logits)
        self.block_weights = block_param_counts(model)
        self._col_norms = [
            {name: column_l2_norms(block.weights[name]) for name in LAYER_NAMES}
            for block in model.blocks
        ]
        self._ones = {
            name: np.ones(model.config.layer_shape(name)[1], dtype=np.float32)
            for name in LAYER_NAMES
        }
        self._thr_memo: dict[tuple[int, str, float], float] = {}

    def threshold(self, b: int, name: str, keep_ratio: float) -> float:
        key = (b, name, round(float(keep_ratio), 9))
        if key not in self._thr_memo:
            self._thr_memo[key] = layer_threshold(
                self.caches[b].layer_inputs[name], self._col_norms[b][name], 0.0, keep_ratio
            )
        return self._thr_memo[key]

    def state(self, b: int, name: str, keep_ratio: float) -> SparsityState:
        return SparsityState(
            alpha=0.0,
            threshold=self.threshold(b, name, keep_ratio),
            keep_ratio=float(keep_ratio),
            col_norm_pow=self._ones[name],
        )

    def states_for(self, p: np.ndarray) -> list[dict[str, SparsityState]]:
        """Uniform-within-block states at alpha = 0 for one block allocation."""
        return [
            {name: self.state(b, name, 1.0 - float(p[b])) for name in LAYER_NAMES}
            for b in range(self.model.config.n_blocks)
        ]

    def loss(self, p: np.ndarray) -> float:
        """Token-averaged KL(dense || sparse) over the calibration batch."""
        trace = model_forward_batch(self.model, self.calib_ids, states=self.states_for(p))
        sparse_probs = softmax(trace.logits)
        return float(np.mean(kl_rows(self.dense_probs, sparse_probs)))


def evaluate_allocation(candidate: BlockAllocation, scorer: AllocationScorer) -> float:
    return scorer.loss(candidate.p)


def block_level_allocation(
    scorer: AllocationScorer,
    p_target: float,
    params: EvoParams,
    audit: list | None = None,
) -> tuple[BlockAllocation, list[float]]:
    """Evolutionary block-level search from a uniform start.

    Selection is argmin over offspring plus the parent (elitism), so the
    incumbent loss never regresses.  Deterministic for a fixed seed.  When
    `audit` is given, every evaluated candidate is appended as (p, loss).
    """
    if not 0.0 < p_target < 1.0:
        raise ValueError(f"p_target must lie in (0, 1), got {p_target}")
    rng = np.random.default_rng(params.seed)
    n = scorer.model.config.n_blocks
    weights = scorer.block_weights
    incumbent = BlockAllocation(np.full(n, p_target, dtype=np.float64), p_target, 0)
    incumbent_loss = scorer.loss(incumbent.p)
    if audit is not None:
        audit.append((incumbent.p.copy(), incumbent_loss))
    history = [incumbent_loss]
    for _ in range(params.generations):
        # All offspring descend from the same parent; selection happens at the
        # end of the generation over offspring plus the parent.
        best_child, best_loss = None, incumbent_loss
        for _ in range(params.offspring_per_gen):
            child = mutate_candidate(incumbent, params, rng, weights)
            loss = scorer.loss(child.p)
            if audit is not None:
                audit.append((child.p.copy(), loss))
            if loss < best_loss:
                best_child, best_loss = child, loss
        if best_child is not None:
            incumbent, incumbent_loss = best_child, best_loss
        history.append(incumbent_loss)
    return incumbent, history


# ---------------------------------------------------------------------------
# Fine stage: greedy intra-block allocation.


def greedy_allocate(
    names: list[str],
    param_counts: dict[str, float],
    budget: float,
    delta: float,
    eval_fn,
) -> tuple[dict[str, float], list[GreedyStep]]:
    """Distribute `budget` over `names` in increments of `delta`.

    Every iteration evaluates incrementing each unsaturated layer and commits
    the one with the smallest error (ties break toward the earlier name).
    Stops once the parameter-weighted mean sparsity reaches the budget; the
    final increment is clamped so the block lands on its budget exactly
    instead of overshooting by up to one step.
    """
    if not 0.0 <= budget <= 1.0:
        raise ValueError(f"budget must lie in [0, 1], got {budget}")
    p = {name: 0.0 for name in names}
    wsum = sum(param_counts[name] for name in names)
    trace: list[GreedyStep] = []
    memo: dict[tuple, float] = {}

    def effective() -> float:
        return sum(p[name] * param_counts[name] for name in names) / wsum

    def eval_memo(trial: dict[str, float]) -> float:
        key = tuple(round(trial[name], 9) for name in names)
        if key not in memo:
            memo[key] = eval_fn(trial)
        return memo[key]

    step = 0
    while effective() < budget - 1e-12:
        open_names = [name for name in names if p[name] < 1.0 - 1e-12]
        if not open_names:
            raise ValueError("sparsity budget unreachable: all layers saturated")
        errors = {}
        best_name, best_err = None, np.inf
        for name in open_names:
            trial = dict(p)
            trial[name] = min(1.0, trial[name] + delta)
            err = eval_memo(trial)
            errors[name] = err
            if err < best_err:  # strict: ties keep the earlier layer
                best_name, best_err = name, err
        inc = min(delta, 1.0 - p[best_name])
        shortfall = (budget - effective()) * wsum / param_counts[best_name]
        p[best_name] = p[best_name] + min(inc, shortfall)
        trace.append(GreedyStep(step=step, chosen=best_name, chosen_error=best_err, errors=errors))
        step += 1
    return p, trace


def intra_block_allocation(
    block: Block,
    config: ModelConfig,
    budget: float,
    delta: float,
    cache: BlockCalibCache,
) -> tuple[LayerAllocation, list[GreedyStep]]:
    """Greedy layer-level split of one block's sparsity budget.

    Trial thresholds are refitted per keep ratio at alpha = 0; errors are the
    squared distance between the sparse and cached dense block outputs.
    """
    x3, dense_out = cache.stacked()
    col_norms = {name: column_l2_norms(block.weights[name]) for name in LAYER_NAMES}
    ones = {
        name: np.ones(config.layer_shape(name)[1], dtype=np.float32) for name in LAYER_NAMES
    }
    thr_memo: dict[tuple[str, float], float] = {}

    def state(name: str, sparsity: float) -> SparsityState:
        r = 1.0 - sparsity
        key = (name, round(r, 9))
        if key not in thr_memo:
            thr_memo[key] = layer_threshold(cache.layer_inputs[name], col_norms[name], 0.0, r)
        return SparsityState(0.0, thr_memo[key], r, ones[name])

    def eval_fn(trial: dict[str, float]) -> float:
        states = {name: state(name, trial[name]) for name in LAYER_NAMES}
        y = block_forward(block, x3, config, states=states)
        diff = (y.astype(np.float64) - dense_out.astype(np.float64)).ravel()
        return float(diff @ diff)

    param_counts = {name: float(block.weights[name].size) for name in LAYER_NAMES}
    p, trace = greedy_allocate(list(LAYER_NAMES), param_counts, budget, delta, eval_fn)
    return LayerAllocation(sparsity=p, budget=budget), trace
