"""Calibration corpus ingestion, byte-level tokenization, activation capture."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibrate import BlockCalibCache
from .model import ToyTransformer, model_forward_batch


def tokenize_bytes(data: bytes) -> np.ndarray:
    """Byte-level tokenization: one token id per byte, vocab 256."""
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def detokenize(ids: np.ndarray) -> bytes:
    return bytes(np.asarray(ids, dtype=np.uint8).tolist())


@dataclass
class CalibrationSet:
    sequences: list[np.ndarray]
    manifest: list[dict]
    seed: int

    @property
    def token_count(self) -> int:
        return sum(len(s) for s in self.sequences)

    def as_batch(self) -> np.ndarray:
        """Stack into [S, T]; all ingested windows share one length."""
        return np.stack(self.sequences)


def _list_input_files(paths) -> list[Path]:
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(q for q in p.rglob("*") if q.is_file()))
        elif p.is_file():
            files.append(p)
    return files


def ingest_corpus(paths, max_sequences: int, seq_len: int, seed: int) -> CalibrationSet:
    """Sample non-overlapping byte windows from local files.

    Multiple paths model a mixed-domain corpus; the per-path quota is
    proportional to how many windows each path can supply.  Sampling is
    deterministic for a fixed (paths, params, seed).
    """
    if max_sequences < 1 or seq_len < 1:
        raise ValueError("max_sequences and seq_len must be positive")
    files = _list_input_files(paths)
    if not files:
        raise ValueError(f"no readable input files under {list(paths)}")

    windows = []  # (path, byte offset)
    for f in files:
        size = f.stat().st_size
        for start in range(0, size - seq_len + 1, seq_len):
            windows.append((f, start))
    if not windows:
        raise ValueError(
            f"no window of {seq_len} bytes available in the given inputs"
        )
    if len(windows) < max_sequences:
        warnings.warn(
            f"requested {max_sequences} windows but only {len(windows)} exist; "
            "returning what exists"
        )
    rng = np.random.default_rng(seed)
    picks = rng.permutation(len(windows))[: min(max_sequences, len(windows))]
    picks = np.sort(picks)

    sequences, manifest = [], []
    for i in picks:
        f, start = windows[i]
        with open(f, "rb") as fh:
            fh.seek(start)
            raw = fh.read(seq_len)
        sequences.append(tokenize_bytes(raw))
        manifest.append({"path": str(f), "offset": int(start), "length": int(seq_len)})
    return CalibrationSet(sequences=sequences, manifest=manifest, seed=seed)


def capture_block_inputs(
    model: ToyTransformer, calib: CalibrationSet
) -> tuple[list[BlockCalibCache], np.ndarray]:
    """One dense forward per calibration sequence; cache per-block entry
    activations, dense block outputs, per-projection inputs (pooled for
    threshold fitting), and dense final logits.

    Returns (per-block caches, dense logits [S, T, vocab]).
    """
    ids = calib.as_batch()
    trace = model_forward_batch(model, ids, collect_layer_inputs=True)
    caches = []
    for b in range(model.config.n_blocks):
        caches.append(
            BlockCalibCache(
                seq_inputs=[trace.block_inputs[b][s] for s in range(ids.shape[0])],
                seq_dense_out=[trace.block_outputs[b][s] for s in range(ids.shape[0])],
                layer_inputs=trace.layer_inputs[b],
            )
        )
    return caches, trace.logits
