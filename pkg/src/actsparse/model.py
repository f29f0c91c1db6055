"""Toy decoder-only transformer with optionally-sparse linear projections.

Architecture: pre-RMS-norm causal attention (no positional encoding) plus a
SwiGLU MLP -- the minimal structure exposing the seven projection sites that
get sparsified.  Every projection accepts an optional SparsityState; masking
is applied to the projection's input channels.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import MacCounter, dense_matvec
from .numerics import column_l2_norms
from .scoring import SparsityState, apply_sparse_projection

LAYER_NAMES = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")

# Column scale factors at init are drawn log-uniform over this range so that
# per-layer column norms are deliberately heterogeneous (some low-activation
# channels feed high-norm columns, which is what weight-aware scoring exploits).
INIT_COL_SCALE_RANGE = (0.25, 4.0)


@dataclass
class ModelConfig:
    n_blocks: int = 8
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 344
    vocab_size: int = 256
    max_seq: int = 256
    rms_eps: float = 1e-5

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def layer_shape(self, name: str) -> tuple[int, int]:
        d, f = self.d_model, self.d_ff
        return {
            "q_proj": (d, d),
            "k_proj": (d, d),
            "v_proj": (d, d),
            "o_proj": (d, d),
            "gate_proj": (f, d),
            "up_proj": (f, d),
            "down_proj": (d, f),
        }[name]


@dataclass
class Block:
    weights: dict[str, np.ndarray]
    attn_norm: np.ndarray
    mlp_norm: np.ndarray

    def param_count(self) -> int:
        return sum(int(w.size) for w in self.weights.values())


@dataclass
class ToyTransformer:
    config: ModelConfig
    embedding: np.ndarray  # [vocab, d_model]; tied with the output head
    blocks: list[Block]
    final_norm: np.ndarray


@dataclass
class ForwardTrace:
    block_inputs: list[np.ndarray]
    block_outputs: list[np.ndarray]
    logits: np.ndarray
    layer_inputs: list[dict[str, np.ndarray]] | None = None


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    scale = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + eps)
    return (x * scale * gain).astype(np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    return (x / (1.0 + np.exp(-x))).astype(np.float32)


def _project(
    x2d: np.ndarray,
    w: np.ndarray,
    state: SparsityState | None,
    counter: MacCounter | None,
    sparse_rows: np.ndarray | None,
) -> np.ndarray:
    """Project [tokens, n_in] through W, masking rows flagged sparse.

    The sparse path is the masked-dense form (x * m) @ W.T, which the gather
    kernel reproduces within accumulation tolerance; MACs are counted as
    rows x kept per token.
    """
    tokens = x2d.shape[0]
    m, n = w.shape
    if state is None:
        if counter is not None:
            counter.add_site(tokens, m, n, tokens * n)
        return x2d @ w.T
    mask = (np.abs(x2d) * state.col_norm_pow) >= state.threshold
    if sparse_rows is not None:
        mask[~sparse_rows] = True
    if counter is not None:
        counter.add_site(tokens, m, n, int(mask.sum()))
    return (x2d * mask) @ w.T


def _causal_attention(q, k, v, n_heads: int) -> np.ndarray:
    # q, k, v: [S, T, d_model]
    s, t, d = q.shape
    dh = d // n_heads
    qh = q.reshape(s, t, n_heads, dh)
    kh = k.reshape(s, t, n_heads, dh)
    vh = v.reshape(s, t, n_heads, dh)
    scores = np.einsum("sihd,sjhd->shij", qh, kh) / np.sqrt(dh)
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(causal, -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = np.einsum("shij,sjhd->sihd", weights, vh)
    return np.ascontiguousarray(out.reshape(s, t, d), dtype=np.float32)


def block_forward(
    block: Block,
    x: np.ndarray,
    config: ModelConfig,
    states: dict[str, SparsityState] | None = None,
    counter: MacCounter | None = None,
    sparse_rows: np.ndarray | None = None,
    collect_layer_inputs: bool = False,
):
    """One transformer block over [T, d] or [S, T, d] activations.

    Returns the output activations, or (output, layer_inputs) when
    collect_layer_inputs is set; layer_inputs maps each projection name to the
    flattened [tokens, n_in] matrix it consumed.
    """
    squeeze = x.ndim == 2
    x3 = x[None] if squeeze else x
    s, t, d = x3.shape
    if d != config.d_model:
        raise ValueError(f"activation width {d} != d_model {config.d_model}")
    if states is not None:
        missing = [n for n in LAYER_NAMES if n not in states]
        if missing:
            raise ValueError(f"missing sparsity state for layers: {missing}")
    st = (lambda name: states[name]) if states is not None else (lambda name: None)
    rows = None
    if sparse_rows is not None:
        rows = np.asarray(sparse_rows, dtype=bool).ravel()
        if rows.size == t:
            rows = np.tile(rows, s)
        if rows.size != s * t:
            raise ValueError("sparse_rows length must match the token count")

    flat = lambda a: a.reshape(s * t, -1)
    w = block.weights

    h = rms_norm(x3, block.attn_norm, config.rms_eps)
    hf = flat(h)
    q = _project(hf, w["q_proj"], st("q_proj"), counter, rows).reshape(s, t, d)
    k = _project(hf, w["k_proj"], st("k_proj"), counter, rows).reshape(s, t, d)
    v = _project(hf, w["v_proj"], st("v_proj"), counter, rows).reshape(s, t, d)
    attn = _causal_attention(q, k, v, config.n_heads)
    af = flat(attn)
    o = _project(af, w["o_proj"], st("o_proj"), counter, rows).reshape(s, t, d)
    x3 = (x3 + o).astype(np.float32)

    h2 = rms_norm(x3, block.mlp_norm, config.rms_eps)
    h2f = flat(h2)
    g = _project(h2f, w["gate_proj"], st("gate_proj"), counter, rows)
    u = _project(h2f, w["up_proj"], st("up_proj"), counter, rows)
    hidden = (silu(g) * u).astype(np.float32)
    down = _project(hidden, w["down_proj"], st("down_proj"), counter, rows)
    out = (x3 + down.reshape(s, t, d)).astype(np.float32)
    if squeeze:
        out = out[0]
    if collect_layer_inputs:
        layer_inputs = {
            "q_proj": hf,
            "k_proj": hf,
            "v_proj": hf,
            "o_proj": af,
            "gate_proj": h2f,
            "up_proj": h2f,
            "down_proj": hidden,
        }
        return out, layer_inputs
    return out


def model_forward_batch(
    model: ToyTransformer,
    token_ids: np.ndarray,
    states: list[dict[str, SparsityState]] | None = None,
    counter: MacCounter | None = None,
    sparse_rows: np.ndarray | None = None,
    collect_layer_inputs: bool = False,
) -> ForwardTrace:
    """Forward a batch of equal-length sequences ([S, T] token ids)."""
    cfg = model.config
    ids = np.asarray(token_ids)
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ValueError("expected a non-empty [S, T] id array")
    if ids.shape[1] > cfg.max_seq:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq {cfg.max_seq}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")
    if states is not None and len(states) != cfg.n_blocks:
        raise ValueError("states must provide one entry per block")

    x = model.embedding[ids].astype(np.float32)
    block_inputs, block_outputs = [], []
    layer_inputs = [] if collect_layer_inputs else None
    for b, block in enumerate(model.blocks):
        block_inputs.append(x)
        result = block_forward(
            block,
            x,
            cfg,
            states=states[b] if states is not None else None,
            counter=counter,
            sparse_rows=sparse_rows,
            collect_layer_inputs=collect_layer_inputs,
        )
        if collect_layer_inputs:
            x, li = result
            layer_inputs.append(li)
        else:
            x = result
        block_outputs.append(x)
    xn = rms_norm(x, model.final_norm, cfg.rms_eps)
    logits = (xn @ model.embedding.T).astype(np.float32)
    return ForwardTrace(block_inputs, block_outputs, logits, layer_inputs)


def model_forward(
    model: ToyTransformer,
    token_ids: np.ndarray,
    states: list[dict[str, SparsityState]] | None = None,
    counter: MacCounter | None = None,
    sparse_rows: np.ndarray | None = None,
    collect_layer_inputs: bool = False,
) -> ForwardTrace:
    """Forward a single token-id sequence; the trace keeps per-block inputs."""
    ids = np.asarray(token_ids).ravel()
    if ids.size == 0:
        raise ValueError("empty input sequence")
    trace = model_forward_batch(
        model,
        ids[None, :],
        states=states,
        counter=counter,
        sparse_rows=sparse_rows,
        collect_layer_inputs=collect_layer_inputs,
    )
    return ForwardTrace(
        [bi[0] for bi in trace.block_inputs],
        [bo[0] for bo in trace.block_outputs],
        trace.logits[0],
        trace.layer_inputs,
    )


# ---------------------------------------------------------------------------
# Single-token decode path (KV cache), used by the throughput benchmark.


@dataclass
class KVCache:
    k: list[np.ndarray] = field(default_factory=list)  # per block, [T, d_model]
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def empty(cls, n_blocks: int, d_model: int) -> "KVCache":
        return cls(
            [np.zeros((0, d_model), dtype=np.float32) for _ in range(n_blocks)],
            [np.zeros((0, d_model), dtype=np.float32) for _ in range(n_blocks)],
        )


def _decode_project(x, w, state, counter, sparse):
    m, n = w.shape
    if state is None or not sparse:
        if counter is not None:
            counter.add_site(1, m, n, n)
        return dense_matvec(x, w)
    if counter is not None:
        mask = (np.abs(x) * state.col_norm_pow) >= state.threshold
        counter.add_site(1, m, n, int(mask.sum()))
    return apply_sparse_projection(x, w, state)


def decode_step(
    model: ToyTransformer,
    token_id: int,
    cache: KVCache,
    states: list[dict[str, SparsityState]] | None = None,
    counter: MacCounter | None = None,
    sparse: bool = True,
) -> np.ndarray:
    """Advance one token through the model via the gather kernels.

    K/V entries are cached post-projection, so masking the q/k/v/o inputs of
    the current token is self-consistent with earlier cached entries.
    Returns the logits for the new position.
    """
    cfg = model.config
    x = model.embedding[token_id].astype(np.float32)
    for b, block in enumerate(model.blocks):
        st = states[b] if states is not None else None
        get = (lambda name: st[name]) if st is not None else (lambda name: None)
        w = block.weights
        h = rms_norm(x, block.attn_norm, cfg.rms_eps)
        q = _decode_project(h, w["q_proj"], get("q_proj"), counter, sparse)
        k = _decode_project(h, w["k_proj"], get("k_proj"), counter, sparse)
        v = _decode_project(h, w["v_proj"], get("v_proj"), counter, sparse)
        cache.k[b] = np.vstack([cache.k[b], k[None]])
        cache.v[b] = np.vstack([cache.v[b], v[None]])
        t = cache.k[b].shape[0]
        dh = cfg.head_dim
        qh = q.reshape(cfg.n_heads, dh)
        kh = cache.k[b].reshape(t, cfg.n_heads, dh)
        vh = cache.v[b].reshape(t, cfg.n_heads, dh)
        scores = np.einsum("hd,thd->ht", qh, kh) / np.sqrt(dh)
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        attn = np.einsum("ht,thd->hd", weights, vh).reshape(cfg.d_model).astype(np.float32)
        o = _decode_project(attn, w["o_proj"], get("o_proj"), counter, sparse)
        x = (x + o).astype(np.float32)
        h2 = rms_norm(x, block.mlp_norm, cfg.rms_eps)
        g = _decode_project(h2, w["gate_proj"], get("gate_proj"), counter, sparse)
        u = _decode_project(h2, w["up_proj"], get("up_proj"), counter, sparse)
        hidden = (silu(g) * u).astype(np.float32)
        d = _decode_project(hidden, w["down_proj"], get("down_proj"), counter, sparse)
        x = (x + d).astype(np.float32)
    xn = rms_norm(x, model.final_norm, cfg.rms_eps)
    return (xn @ model.embedding.T).astype(np.float32)


# ---------------------------------------------------------------------------
# Initialization and weight I/O.


def init_toy_model(config: ModelConfig, seed: int) -> ToyTransformer:
    """Deterministic random weights with heterogeneous per-column scales."""
    rng = np.random.default_rng(seed)
    emb = (rng.standard_normal((config.vocab_size, config.d_model)) * 0.5).astype(np.float32)
    lo, hi = INIT_COL_SCALE_RANGE
    blocks = []
    residual_scale = 1.0 / np.sqrt(2.0 * config.n_blocks)
    for _ in range(config.n_blocks):
        weights = {}
        for name in LAYER_NAMES:
            m, n = config.layer_shape(name)
            w = rng.standard_normal((m, n)) / np.sqrt(n)
            col_scale = np.exp(rng.uniform(np.log(lo), np.log(hi), size=n))
            w = w * col_scale[None, :]
            if name in ("o_proj", "down_proj"):
                w = w * residual_scale
            weights[name] = w.astype(np.float32)
        blocks.append(
            Block(
                weights=weights,
                attn_norm=np.ones(config.d_model, dtype=np.float32),
                mlp_norm=np.ones(config.d_model, dtype=np.float32),
            )
        )
    return ToyTransformer(
        config=config,
        embedding=emb,
        blocks=blocks,
        final_norm=np.ones(config.d_model, dtype=np.float32),
    )


def column_norm_spread(model: ToyTransformer) -> float:
    """Min over layers of (max column norm / min column norm)."""
    spread = np.inf
    for block in model.blocks:
        for w in block.weights.values():
            norms = column_l2_norms(w)
            spread = min(spread, float(norms.max() / norms.min()))
    return spread


_MAGIC = "toymodel-v1"


def _iter_tensors(model: ToyTransformer):
    yield "embedding", model.embedding
    for b, block in enumerate(model.blocks):
        for name in LAYER_NAMES:
            yield f"block{b}.{name}", block.weights[name]
        yield f"block{b}.attn_norm", block.attn_norm
        yield f"block{b}.mlp_norm", block.mlp_norm
    yield "final_norm", model.final_norm


def save_model(model: ToyTransformer, path) -> None:
    """Manifest text header + raw little-endian float32 payloads.

    Manifest line format:
        tensor <name> <ndim> <dim...> <payload_offset> <byte_length> <crc32>
    Offsets are relative to the first payload byte (right after the `end`
    line).  The config is written to a `<path>.cfg` sidecar as key=value pairs.
    """
    path = Path(path)
    lines = [_MAGIC]
    payloads = []
    offset = 0
    for name, tensor in _iter_tensors(model):
        raw = np.ascontiguousarray(tensor, dtype="<f4").tobytes()
        dims = " ".join(str(d) for d in tensor.shape)
        lines.append(
            f"tensor {name} {tensor.ndim} {dims} {offset} {len(raw)} {zlib.crc32(raw)}"
        )
        payloads.append(raw)
        offset += len(raw)
    lines.append("end")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for raw in payloads:
            fh.write(raw)
    tmp.replace(path)

    cfg = model.config
    cfg_lines = [
        f"n_blocks={cfg.n_blocks}",
        f"d_model={cfg.d_model}",
        f"n_heads={cfg.n_heads}",
        f"d_ff={cfg.d_ff}",
        f"vocab_size={cfg.vocab_size}",
        f"max_seq={cfg.max_seq}",
        f"rms_eps={cfg.rms_eps!r}",
    ]
    cfg_tmp = Path(str(path) + ".cfg.tmp")
    cfg_tmp.write_text("\n".join(cfg_lines) + "\n")
    cfg_tmp.replace(Path(str(path) + ".cfg"))


def _load_config(path: Path) -> ModelConfig:
    cfg_path = Path(str(path) + ".cfg")
    if not cfg_path.exists():
        raise FileNotFoundError(f"missing config sidecar {cfg_path}")
    values = {}
    for line in cfg_path.read_text().splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    return ModelConfig(
        n_blocks=int(values["n_blocks"]),
        d_model=int(values["d_model"]),
        n_heads=int(values["n_heads"]),
        d_ff=int(values["d_ff"]),
        vocab_size=int(values["vocab_size"]),
        max_seq=int(values["max_seq"]),
        rms_eps=float(values["rms_eps"]),
    )


def load_model(path) -> ToyTransformer:
    path = Path(path)
    config = _load_config(path)
    data = path.read_bytes()
    newline = data.find(b"\n")
    if newline < 0 or data[:newline].decode("ascii", "replace") != _MAGIC:
        raise ValueError(f"{path}: not a {_MAGIC} file")
    entries = []
    pos = newline + 1
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise ValueError(f"{path}: truncated manifest")
        line = data[pos:nl].decode("ascii")
        pos = nl + 1
        if line == "end":
            break
        parts = line.split()
        if parts[0] != "tensor":
            raise ValueError(f"{path}: malformed manifest line: {line!r}")
        name = parts[1]
        ndim = int(parts[2])
        shape = tuple(int(d) for d in parts[3 : 3 + ndim])
        off, length, crc = (int(v) for v in parts[3 + ndim : 6 + ndim])
        entries.append((name, shape, off, length, crc))
    payload = data[pos:]

    tensors = {}
    for name, shape, off, length, crc in entries:
        raw = payload[off : off + length]
        if len(raw) != length:
            raise ValueError(f"tensor {name}: truncated payload")
        if zlib.crc32(raw) != crc:
            raise ValueError(f"tensor {name}: CRC32 mismatch")
        count = 1
        for d in shape:
            count *= d
        if count * 4 != length:
            raise ValueError(f"tensor {name}: shape {shape} disagrees with byte length {length}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    def take(name, shape):
        if name not in tensors:
            raise ValueError(f"tensor {name}: missing from manifest")
        if tensors[name].shape != shape:
            raise ValueError(
                f"tensor {name}: expected shape {shape}, found {tensors[name].shape}"
            )
        return tensors[name]

    blocks = []
    for b in range(config.n_blocks):
        weights = {
            name: take(f"block{b}.{name}", config.layer_shape(name)) for name in LAYER_NAMES
        }
        blocks.append(
            Block(
                weights=weights,
                attn_norm=take(f"block{b}.attn_norm", (config.d_model,)),
                mlp_norm=take(f"block{b}.mlp_norm", (config.d_model,)),
            )
        )
    return ToyTransformer(
        config=config,
        embedding=take("embedding", (config.vocab_size, config.d_model)),
        blocks=blocks,
        final_norm=take("final_norm", (config.d_model,)),
    )
