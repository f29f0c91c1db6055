"""Command-line entry points: calibration pipeline, evaluation, sensitivity
sweeps, throughput benchmarks, ablation, and kernel micro-benchmarks.

All reports are CSV files with a provenance comment line (seed, tool version,
config hash); files are written atomically.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .allocate import EvoParams
from .calibrate import AlphaGrid
from .data import capture_block_inputs, ingest_corpus
from .evaluate import (
    PREFILL_POLICIES,
    bench_decode,
    evaluate,
    sweep_block_sensitivity,
)
from .kernels import bench_matvec, write_bench_csv
from .model import LAYER_NAMES, ModelConfig, init_toy_model, load_model, save_model
from .pipeline import STAGES, run_pipeline
from .plan import load_plan, save_plan, states_from_plan, weighted_layer_sparsity


def _config_hash(args: argparse.Namespace) -> str:
    payload = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[
        :16
    ]


def _provenance_line(args) -> str:
    return f"seed={args.seed} tool_version={__version__} config_hash={_config_hash(args)}"


def _write_csv(path: Path, provenance: str, header: list[str], rows) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(f"# {provenance}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    tmp.replace(path)
    print(f"wrote {path}")


def _parse_alpha_grid(text: str) -> AlphaGrid:
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected lo:hi:step, got {text!r}") from exc
    return AlphaGrid(lo=lo, hi=hi, step=step)


def _parse_levels(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _load_calib(args, seq_len=None):
    if not args.calib:
        raise ValueError("at least one --calib path is required")
    return ingest_corpus(
        args.calib,
        max_sequences=args.calib_sequences,
        seq_len=seq_len or args.seq_len,
        seed=args.seed,
    )


def _load_heldout(args):
    if not args.heldout:
        raise ValueError("at least one --heldout path is required")
    held = ingest_corpus(
        args.heldout, max_sequences=args.heldout_sequences, seq_len=args.seq_len, seed=args.seed + 1
    )
    return held.sequences


def _evo_params(args) -> EvoParams:
    return EvoParams(
        generations=args.evo_generations,
        offspring_per_gen=args.evo_offspring,
        mutation_step=args.evo_step,
        mutable_fraction=args.evo_mutable_frac,
        seed=args.seed,
    )


def _attn_mlp_split(model, layer_sparsity: dict[str, float]) -> tuple[float, float]:
    attn_names = ("q_proj", "k_proj", "v_proj", "o_proj")
    mlp_names = ("gate_proj", "up_proj", "down_proj")

    def weighted(names):
        sizes = [np.prod(model.config.layer_shape(n)) for n in names]
        return float(
            sum(layer_sparsity[n] * s for n, s in zip(names, sizes)) / sum(sizes)
        )

    return weighted(attn_names), weighted(mlp_names)


# ---------------------------------------------------------------------------
# Subcommands.


def cmd_init_model(args):
    config = ModelConfig(
        n_blocks=args.blocks,
        d_model=args.d_model,
        n_heads=args.heads,
        d_ff=args.d_ff,
        max_seq=args.max_seq,
    )
    model = init_toy_model(config, args.seed)
    save_model(model, args.model)
    print(f"wrote {args.model} ({config.n_blocks} blocks, d_model={config.d_model})")


def cmd_pipeline(args):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(args.model)
    calib = _load_calib(args)
    result = run_pipeline(
        model,
        calib,
        p_target=args.target_sparsity,
        evo=_evo_params(args),
        grid=args.alpha_grid,
        greedy_step=args.greedy_step,
        evo_sequences=args.evo_sequences,
    )
    plan_path = out_dir / "plan.json"
    save_plan(result.plan, plan_path)
    print(f"wrote {plan_path}")
    print(f"parameter-weighted sparsity: {weighted_layer_sparsity(result.plan, model):.6f}")

    prov = _provenance_line(args)
    if result.alpha_results is not None:
        rows = []
        for b, res in enumerate(result.alpha_results):
            for name in LAYER_NAMES:
                rows.append([b, name, res.alphas[name], res.block_sse])
        _write_csv(out_dir / "alpha_table.csv", prov, ["block", "layer", "alpha", "block_mse"], rows)
    rows = []
    for b in range(model.config.n_blocks):
        layer_sparsity = {
            name: result.plan.layer(b, name).sparsity for name in LAYER_NAMES
        }
        attn_s, mlp_s = _attn_mlp_split(model, layer_sparsity)
        rows.append(
            [b, result.plan.block_sparsity[b], attn_s, mlp_s]
            + [layer_sparsity[name] for name in LAYER_NAMES]
        )
    _write_csv(
        out_dir / "allocation.csv",
        prov,
        ["block", "sparsity", "attn_sparsity", "mlp_sparsity", *LAYER_NAMES],
        rows,
    )
    if result.greedy_traces is not None:
        trace_path = out_dir / "greedy_trace.log"
        tmp = trace_path.with_suffix(".log.tmp")
        with open(tmp, "w") as fh:
            fh.write(f"# {prov}\n")
            for b, trace in enumerate(result.greedy_traces):
                for step in trace:
                    fh.write(
                        f"block={b} step={step.step} layer={step.chosen} "
                        f"error={step.chosen_error!r}\n"
                    )
        tmp.replace(trace_path)
        print(f"wrote {trace_path}")


def cmd_eval(args):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(args.model)
    heldout = _load_heldout(args)
    states = None
    if args.plan:
        states = states_from_plan(load_plan(args.plan), model)
    report = evaluate(model, heldout, states=states, policy=args.prefill_policy)
    rows = [["dense_ppl", report.dense_ppl], ["mac_ratio", report.mac_ratio]]
    if report.sparse_ppl is not None:
        rows.insert(1, ["sparse_ppl", report.sparse_ppl])
        rows.insert(2, ["mean_kl", report.mean_kl])
    _write_csv(out_dir / "eval_report.csv", _provenance_line(args), ["metric", "value"], rows)
    for metric, value in rows:
        print(f"{metric}: {value}")


def cmd_sweep(args):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(args.model)
    calib = _load_calib(args)
    heldout = _load_heldout(args)
    caches, _ = capture_block_inputs(model, calib)
    rows = sweep_block_sensitivity(model, caches, heldout, args.levels)
    _write_csv(
        out_dir / "sweep.csv",
        _provenance_line(args),
        ["block", "sparsity", "ppl", "delta_ppl_pct"],
        [[r["block"], r["sparsity"], r["ppl"], r["delta_ppl_pct"]] for r in rows],
    )


def cmd_bench(args):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(args.model)
    states = states_from_plan(load_plan(args.plan), model) if args.plan else None
    result = bench_decode(
        model,
        states,
        n_tokens=args.n_tokens,
        prompt_len=args.prompt_len,
        policy=args.prefill_policy,
    )
    rows = [
        ["dense_tokens_per_s", result.dense_tokens_per_s],
        ["sparse_tokens_per_s", result.sparse_tokens_per_s],
        ["mac_ratio", result.mac_ratio],
        ["n_tokens", result.n_tokens],
    ]
    _write_csv(out_dir / "bench.csv", _provenance_line(args), ["metric", "value"], rows)
    for metric, value in rows:
        print(f"{metric}: {value}")


def cmd_ablate(args):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(args.model)
    calib = _load_calib(args)
    heldout = _load_heldout(args)
    rows = []
    for stage in STAGES:
        result = run_pipeline(
            model,
            calib,
            p_target=args.target_sparsity,
            evo=_evo_params(args),
            grid=args.alpha_grid,
            greedy_step=args.greedy_step,
            stage=stage,
            evo_sequences=args.evo_sequences,
        )
        # Full sparsification on evaluation so every row is compared at the
        # same MAC budget as the calibration objective.
        report = evaluate(model, heldout, states=result.states, policy="all")
        rows.append([stage, report.mean_kl, report.sparse_ppl, report.dense_ppl, report.mac_ratio])
        print(
            f"{stage}: kl={report.mean_kl:.6f} sparse_ppl={report.sparse_ppl:.4f} "
            f"mac_ratio={report.mac_ratio:.4f}"
        )
    _write_csv(
        out_dir / "ablate.csv",
        _provenance_line(args),
        ["stage", "mean_kl", "sparse_ppl", "dense_ppl", "mac_ratio"],
        rows,
    )


def cmd_bench_kernel(args):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = bench_matvec(args.rows, args.cols, args.levels, iters=args.iters, seed=args.seed)
    write_bench_csv(out_dir / "kernel_bench.csv", results, _provenance_line(args))
    for row in results:
        print(
            f"sparsity={row['sparsity']:.2f} ns_per_op={row['ns_per_op']:.0f} "
            f"gmacs_per_s={row['gmacs_per_s']:.2f}"
        )
    print(f"wrote {out_dir / 'kernel_bench.csv'}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actsparse", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, help="model weight file")
    common.add_argument("--plan", default=None, help="sparsity plan file")
    common.add_argument("--calib", action="append", default=[], help="calibration path (repeatable)")
    common.add_argument("--heldout", action="append", default=[], help="held-out path (repeatable)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default="out")
    common.add_argument("--target-sparsity", type=float, default=0.5)
    common.add_argument("--prefill-policy", choices=PREFILL_POLICIES, default="second_half")
    common.add_argument("--evo-generations", type=int, default=400)
    common.add_argument("--evo-offspring", type=int, default=64)
    common.add_argument("--evo-step", type=float, default=0.005)
    common.add_argument("--evo-mutable-frac", type=float, default=0.10)
    common.add_argument("--evo-sequences", type=int, default=8)
    common.add_argument("--alpha-grid", type=_parse_alpha_grid, default=AlphaGrid())
    common.add_argument("--greedy-step", type=float, default=0.05)
    common.add_argument("--calib-sequences", type=int, default=32)
    common.add_argument("--heldout-sequences", type=int, default=8)
    common.add_argument("--seq-len", type=int, default=256)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="create and save a toy model")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", type=int, default=8)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=344)
    p.add_argument("--max-seq", type=int, default=256)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("pipeline", parents=[common], help="calibrate a sparsity plan")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("eval", parents=[common], help="PPL / KL / MAC report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="per-block sensitivity sweep")
    p.add_argument("--levels", type=_parse_levels, default=[0.4, 0.5, 0.6])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", parents=[common], help="decode throughput benchmark")
    p.add_argument("--n-tokens", type=int, default=200)
    p.add_argument("--prompt-len", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", parents=[common], help="component ablation table")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench-kernel", parents=[common], help="matvec kernel benchmark")
    p.add_argument("--rows", type=int, default=4096)
    p.add_argument("--cols", type=int, default=4096)
    p.add_argument("--levels", type=_parse_levels, default=[0.0, 0.25, 0.5, 0.75])
    p.add_argument("--iters", type=int, default=100)
    p.set_defaults(func=cmd_bench_kernel)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # surface the failing stage, nonzero exit
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
