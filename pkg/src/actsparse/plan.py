"""Sparsity plan: the serialized output of the calibration pipeline.

A plan is self-sufficient given the dense weights: per-layer sparsity,
exponent, and threshold (plus the pooled-population size the threshold was
fitted from), with provenance for byte-identical reruns.  Stored as JSON with
sorted keys; the infinity sentinels round-trip through the json module.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import LAYER_NAMES, ToyTransformer
from .scoring import SparsityState

PLAN_FORMAT = "sparsity-plan-v1"


@dataclass
class LayerSetting:
    sparsity: float
    alpha: float
    threshold: float
    pool_size: int


@dataclass
class SparsityPlan:
    p_target: float
    block_sparsity: list[float]
    layers: dict[tuple[int, str], LayerSetting]
    provenance: dict = field(default_factory=dict)

    def layer(self, block: int, name: str) -> LayerSetting:
        return self.layers[(block, name)]


def plan_from_states(
    p_target: float,
    block_sparsity: list[float],
    layer_sparsity: list[dict[str, float]],
    states: list[dict[str, SparsityState]],
    pool_sizes: list[dict[str, int]],
    provenance: dict,
) -> SparsityPlan:
    layers = {}
    for b, per_layer in enumerate(states):
        for name in LAYER_NAMES:
            st = per_layer[name]
            layers[(b, name)] = LayerSetting(
                sparsity=float(layer_sparsity[b][name]),
                alpha=st.alpha,
                threshold=st.threshold,
                pool_size=int(pool_sizes[b][name]),
            )
    return SparsityPlan(
        p_target=float(p_target),
        block_sparsity=[float(p) for p in block_sparsity],
        layers=layers,
        provenance=provenance,
    )


def states_from_plan(plan: SparsityPlan, model: ToyTransformer) -> list[dict[str, SparsityState]]:
    """Rebuild inference states; column-norm powers come from the weights."""
    states = []
    for b, block in enumerate(model.blocks):
        per_layer = {}
        for name in LAYER_NAMES:
            setting = plan.layer(b, name)
            per_layer[name] = SparsityState.for_layer(
                block.weights[name],
                alpha=setting.alpha,
                keep_ratio=1.0 - setting.sparsity,
                threshold=setting.threshold,
            )
        states.append(per_layer)
    return states


def weighted_layer_sparsity(plan: SparsityPlan, model: ToyTransformer) -> float:
    """Parameter-weighted mean of the per-layer sparsities."""
    total, weighted = 0.0, 0.0
    for b, block in enumerate(model.blocks):
        for name in LAYER_NAMES:
            w = float(block.weights[name].size)
            total += w
            weighted += w * plan.layer(b, name).sparsity
    return weighted / total


def _plan_payload(plan: SparsityPlan) -> dict:
    blocks = []
    for b, sparsity in enumerate(plan.block_sparsity):
        layers = {}
        for name in LAYER_NAMES:
            setting = plan.layer(b, name)
            layers[name] = {
                "sparsity": setting.sparsity,
                "alpha": setting.alpha,
                "threshold": setting.threshold,
                "pool_size": setting.pool_size,
            }
        blocks.append({"index": b, "sparsity": sparsity, "layers": layers})
    return {
        "format": PLAN_FORMAT,
        "target_sparsity": plan.p_target,
        "blocks": blocks,
        "provenance": plan.provenance,
    }


def plan_config_hash(plan: SparsityPlan) -> str:
    payload = _plan_payload(plan)
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, allow_nan=True).encode()
    ).hexdigest()[:16]


def save_plan(plan: SparsityPlan, path) -> None:
    path = Path(path)
    text = json.dumps(_plan_payload(plan), sort_keys=True, indent=2, allow_nan=True) + "\n"
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def load_plan(path) -> SparsityPlan:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != PLAN_FORMAT:
        raise ValueError(f"{path}: unrecognized plan format {payload.get('format')!r}")
    blocks = sorted(payload["blocks"], key=lambda b: b["index"])
    layers = {}
    for entry in blocks:
        for name, setting in entry["layers"].items():
            layers[(entry["index"], name)] = LayerSetting(
                sparsity=float(setting["sparsity"]),
                alpha=float(setting["alpha"]),
                threshold=float(setting["threshold"]),
                pool_size=int(setting["pool_size"]),
            )
    return SparsityPlan(
        p_target=float(payload["target_sparsity"]),
        block_sparsity=[float(b["sparsity"]) for b in blocks],
        layers=layers,
        provenance=payload.get("provenance", {}),
    )


def plans_equal(a: SparsityPlan, b: SparsityPlan) -> bool:
    return _plan_payload(a) == _plan_payload(b)
