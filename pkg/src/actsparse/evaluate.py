"""Evaluation: perplexity, KL-to-dense, MAC ratios, sensitivity sweeps, and
decode throughput measurement."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .calibrate import layer_threshold
from .kernels import MacCounter, mac_ratio
from .model import (
    LAYER_NAMES,
    KVCache,
    ToyTransformer,
    decode_step,
    model_forward,
    model_forward_batch,
)
from .numerics import column_l2_norms, kl_rows, softmax
from .scoring import SparsityState

PREFILL_POLICIES = ("first_half", "second_half", "all", "none")


@dataclass
class EvalReport:
    dense_ppl: float
    sparse_ppl: float | None = None
    mean_kl: float | None = None
    mac_ratio: float = 1.0
    dense_tokens_per_s: float | None = None
    sparse_tokens_per_s: float | None = None


def sparse_position_flags(length: int, policy: str) -> np.ndarray | None:
    """Which prefill positions are sparsified; None means no masking at all."""
    if policy not in PREFILL_POLICIES:
        raise ValueError(f"unknown prefill policy {policy!r}")
    if policy == "none":
        return None
    flags = np.ones(length, dtype=bool)
    if policy == "first_half":
        flags[length // 2 :] = False
    elif policy == "second_half":
        flags[: length // 2] = False
    return flags


def _ppl_from_logits(logits: np.ndarray, ids: np.ndarray) -> tuple[float, int]:
    """Sum of next-token negative log likelihoods and prediction count."""
    if ids.shape[-1] < 2:
        return 0.0, 0
    probs = softmax(logits[..., :-1, :])
    targets = ids[..., 1:]
    picked = np.take_along_axis(
        probs.astype(np.float64), targets[..., None], axis=-1
    )[..., 0]
    nll = -np.log(np.maximum(picked, 1e-10))
    return float(nll.sum()), int(nll.size)


def perplexity(
    model: ToyTransformer,
    sequences: list[np.ndarray],
    states=None,
    policy: str = "all",
    counter: MacCounter | None = None,
) -> float:
    total_nll, total_pred = 0.0, 0
    for ids in sequences:
        flags = sparse_position_flags(len(ids), policy) if states is not None else None
        use_states = states if (states is not None and policy != "none") else None
        trace = model_forward(model, ids, states=use_states, counter=counter, sparse_rows=flags)
        nll, n = _ppl_from_logits(trace.logits, np.asarray(ids))
        total_nll += nll
        total_pred += n
    if total_pred == 0:
        raise ValueError("no predictable positions in the held-out data")
    return float(np.exp(total_nll / total_pred))


def mean_token_kl(
    model: ToyTransformer,
    sequences: list[np.ndarray],
    states,
    policy: str = "all",
) -> float:
    """Token-averaged KL(dense || sparse) over sequences (per-sequence mean
    first, then mean over sequences)."""
    per_seq = []
    for ids in sequences:
        flags = sparse_position_flags(len(ids), policy)
        dense = model_forward(model, ids).logits
        use_states = states if policy != "none" else None
        sparse = model_forward(model, ids, states=use_states, sparse_rows=flags).logits
        per_seq.append(float(np.mean(kl_rows(softmax(dense), softmax(sparse)))))
    if not per_seq:
        raise ValueError("empty evaluation set")
    return float(np.mean(per_seq))


def evaluate(
    model: ToyTransformer,
    heldout: list[np.ndarray],
    states=None,
    policy: str = "second_half",
) -> EvalReport:
    """Dense and (optionally) sparse PPL, mean KL, and MAC ratio."""
    if not heldout:
        raise ValueError("missing held-out data")
    dense_ppl = perplexity(model, heldout, states=None)
    if states is None:
        return EvalReport(dense_ppl=dense_ppl, mac_ratio=1.0)
    counter = MacCounter()
    sparse_ppl = perplexity(model, heldout, states=states, policy=policy, counter=counter)
    kl = mean_token_kl(model, heldout, states, policy=policy)
    return EvalReport(
        dense_ppl=dense_ppl,
        sparse_ppl=sparse_ppl,
        mean_kl=kl,
        mac_ratio=mac_ratio(counter),
    )


def uniform_block_states(
    model: ToyTransformer, block_index: int, sparsity: float, caches
) -> list[dict[str, SparsityState] | None]:
    """Sparsify one block at a uniform ratio with alpha = 0; others dense."""
    states: list[dict[str, SparsityState] | None] = [None] * model.config.n_blocks
    block = model.blocks[block_index]
    per_layer = {}
    for name in LAYER_NAMES:
        g = column_l2_norms(block.weights[name])
        r = 1.0 - sparsity
        per_layer[name] = SparsityState(
            alpha=0.0,
            threshold=layer_threshold(caches[block_index].layer_inputs[name], g, 0.0, r),
            keep_ratio=r,
            col_norm_pow=np.ones(g.size, dtype=np.float32),
        )
    states[block_index] = per_layer
    return states


def sweep_block_sensitivity(
    model: ToyTransformer,
    caches,
    heldout: list[np.ndarray],
    levels,
) -> list[dict]:
    """Relative PPL change when sparsifying one block at a time.

    Matches the sensitivity-sweep methodology: uniform alpha-0 sparsity on a
    single block, every other block dense, full sparsification of the
    evaluated positions.
    """
    for s in levels:
        if not 0.0 < s < 1.0:
            raise ValueError(f"sweep levels must lie in (0, 1), got {s}")
    dense_ppl = perplexity(model, heldout, states=None)
    rows = []
    for b in range(model.config.n_blocks):
        for s in levels:
            # model_forward requires a full states list; pad dense blocks with
            # keep-all states so only block b is masked.
            states = uniform_block_states(model, b, s, caches)
            full = [
                st
                if st is not None
                else {
                    name: SparsityState.keep_all(model.config.layer_shape(name)[1])
                    for name in LAYER_NAMES
                }
                for st in states
            ]
            ppl = perplexity(model, heldout, states=full, policy="all")
            rows.append(
                {
                    "block": b,
                    "sparsity": float(s),
                    "ppl": ppl,
                    "delta_ppl_pct": 100.0 * (ppl - dense_ppl) / dense_ppl,
                }
            )
    return rows


# ---------------------------------------------------------------------------
# Decode throughput.


@dataclass
class BenchResult:
    dense_tokens_per_s: float
    sparse_tokens_per_s: float | None
    mac_ratio: float
    n_tokens: int


def _greedy_decode(model, prompt, n_tokens, states, policy, counter=None) -> float:
    """Greedy decode; returns elapsed seconds for the decode phase."""
    cache = KVCache.empty(model.config.n_blocks, model.config.d_model)
    flags = sparse_position_flags(len(prompt), policy) if states is not None else None
    logits = None
    for i, tok in enumerate(prompt):
        sparse = bool(flags[i]) if flags is not None else False
        logits = decode_step(model, int(tok), cache, states=states, counter=counter, sparse=sparse)
    t0 = time.perf_counter()
    for _ in range(n_tokens):
        nxt = int(np.argmax(logits))
        logits = decode_step(model, nxt, cache, states=states, counter=counter, sparse=True)
    return time.perf_counter() - t0


def bench_decode(
    model: ToyTransformer,
    states,
    n_tokens: int = 200,
    prompt_len: int = 5,
    runs: int = 3,
    policy: str = "second_half",
    prompt: np.ndarray | None = None,
) -> BenchResult:
    """Tokens/s for dense vs sparse greedy decode, median of `runs` runs."""
    if prompt is None:
        prompt = np.arange(32, 32 + prompt_len) % model.config.vocab_size
    dense_times = [_greedy_decode(model, prompt, n_tokens, None, policy) for _ in range(runs)]
    dense_tps = n_tokens / statistics.median(dense_times)
    if states is None:
        return BenchResult(dense_tps, None, 1.0, n_tokens)
    counter = MacCounter()
    sparse_times = [
        _greedy_decode(model, prompt, n_tokens, states, policy, counter=counter)
        for _ in range(runs)
    ]
    sparse_tps = n_tokens / statistics.median(sparse_times)
    return BenchResult(dense_tps, sparse_tps, mac_ratio(counter), n_tokens)
