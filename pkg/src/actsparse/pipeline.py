"""End-to-end calibration pipeline.

Stage order: block-level evolutionary allocation, intra-block greedy
allocation, block-wise exponent search, then final threshold fixing.  The
ablation stages cut the pipeline short at well-defined points so the
contribution of each component can be measured at a matched budget.
"""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .allocate import (
    AllocationScorer,
    BlockAllocation,
    EvoParams,
    GreedyStep,
    block_level_allocation,
    intra_block_allocation,
)
from .calibrate import AlphaGrid, AlphaSearchResult, search_alpha_block, fix_thresholds
from .data import CalibrationSet, capture_block_inputs
from .model import LAYER_NAMES, ToyTransformer
from .plan import SparsityPlan, plan_from_states
from .scoring import SparsityState

# Ablation stages, cumulative: each adds one component on top of the previous.
STAGES = ("activation_only", "weight_aware", "coarse", "full")


class PipelineError(RuntimeError):
    """Raised when a pipeline stage fails; the message names the stage."""


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(f"stage {name}: {exc}") from exc


@dataclass
class PipelineResult:
    plan: SparsityPlan
    states: list[dict[str, SparsityState]]
    alpha_results: list[AlphaSearchResult] | None
    allocation: BlockAllocation | None
    greedy_traces: list[list[GreedyStep]] | None
    evo_history: list[float] | None


def _provenance(model, calib, p_target, evo, grid, greedy_step, stage, evo_sequences):
    prov = {
        "tool_version": __version__,
        "stage": stage,
        "seed": evo.seed,
        "target_sparsity": p_target,
        "calib_manifest": calib.manifest,
        "calib_seed": calib.seed,
        "evo": {
            "generations": evo.generations,
            "offspring_per_gen": evo.offspring_per_gen,
            "mutation_step": evo.mutation_step,
            "mutable_fraction": evo.mutable_fraction,
            "sequences": evo_sequences,
        },
        "alpha_grid": {"lo": grid.lo, "hi": grid.hi, "step": grid.step},
        "greedy_step": greedy_step,
        "model": {
            "n_blocks": model.config.n_blocks,
            "d_model": model.config.d_model,
            "n_heads": model.config.n_heads,
            "d_ff": model.config.d_ff,
            "vocab_size": model.config.vocab_size,
            "max_seq": model.config.max_seq,
        },
    }
    prov["config_hash"] = hashlib.sha256(
        json.dumps(prov, sort_keys=True).encode()
    ).hexdigest()[:16]
    return prov


def run_pipeline(
    model: ToyTransformer,
    calib: CalibrationSet,
    p_target: float,
    evo: EvoParams,
    grid: AlphaGrid | None = None,
    greedy_step: float = 0.05,
    stage: str = "full",
    evo_sequences: int = 8,
) -> PipelineResult:
    """Calibrate a sparsity plan on `calib` at global target `p_target`.

    evo_sequences caps how many calibration sequences feed the (expensive)
    KL-scored evolutionary stage; all sequences feed the block caches.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if not 0.0 <= p_target < 1.0:
        raise ValueError(f"target sparsity must lie in [0, 1), got {p_target}")
    grid = grid or AlphaGrid()
    cfg = model.config

    with _stage("capture_activations"):
        caches, dense_logits = capture_block_inputs(model, calib)
    pool_sizes = [
        {name: int(caches[b].layer_inputs[name].size) for name in LAYER_NAMES}
        for b in range(cfg.n_blocks)
    ]
    provenance = _provenance(model, calib, p_target, evo, grid, greedy_step, stage, evo_sequences)

    if p_target == 0.0:
        # Degenerate budget: keep everything, no search needed.
        block_sparsity = [0.0] * cfg.n_blocks
        layer_sparsity = [{name: 0.0 for name in LAYER_NAMES} for _ in range(cfg.n_blocks)]
        keep_ratios = [{name: 1.0 for name in LAYER_NAMES} for _ in range(cfg.n_blocks)]
        alphas = [{name: 0.0 for name in LAYER_NAMES} for _ in range(cfg.n_blocks)]
        states = fix_thresholds(model, keep_ratios, alphas, caches)
        plan = plan_from_states(
            p_target, block_sparsity, layer_sparsity, states, pool_sizes, provenance
        )
        return PipelineResult(plan, states, None, None, None, None)

    allocation = None
    evo_history = None
    if stage in ("coarse", "full"):
        with _stage("block_level_allocation"):
            ids = calib.as_batch()[:evo_sequences]
            scorer = AllocationScorer(model, ids, caches, dense_logits[:evo_sequences])
            allocation, evo_history = block_level_allocation(scorer, p_target, evo)
            block_sparsity = [float(p) for p in allocation.p]
    else:
        block_sparsity = [p_target] * cfg.n_blocks

    greedy_traces = None
    if stage == "full":
        with _stage("intra_block_allocation"):
            layer_sparsity, greedy_traces = [], []
            for b, block in enumerate(model.blocks):
                alloc, trace = intra_block_allocation(
                    block, cfg, block_sparsity[b], greedy_step, caches[b]
                )
                layer_sparsity.append(alloc.sparsity)
                greedy_traces.append(trace)
    else:
        layer_sparsity = [
            {name: block_sparsity[b] for name in LAYER_NAMES} for b in range(cfg.n_blocks)
        ]

    keep_ratios = [
        {name: 1.0 - layer_sparsity[b][name] for name in LAYER_NAMES}
        for b in range(cfg.n_blocks)
    ]

    alpha_results = None
    if stage == "activation_only":
        alphas = [{name: 0.0 for name in LAYER_NAMES} for _ in range(cfg.n_blocks)]
    else:
        with _stage("alpha_search"):
            alpha_results = [
                search_alpha_block(model.blocks[b], cfg, caches[b], keep_ratios[b], grid)
                for b in range(cfg.n_blocks)
            ]
            alphas = [res.alphas for res in alpha_results]

    with _stage("fix_thresholds"):
        states = fix_thresholds(model, keep_ratios, alphas, caches)
    plan = plan_from_states(
        p_target, block_sparsity, layer_sparsity, states, pool_sizes, provenance
    )
    return PipelineResult(plan, states, alpha_results, allocation, greedy_traces, evo_history)
