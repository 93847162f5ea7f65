"""Command-line front end for the distillation and quantization lab.

Subcommands cover the full pipeline: synthesize a byte corpus, pack it
into fixed-length chunks, record teacher logits into a shard store,
train a student against the store, quantize checkpoints, evaluate,
and sweep a cost/quality grid into a delimited report with figures.

Run ``kdlab <subcommand> --help`` for per-command flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .autodiff import Tape
from .checkpoint import load_model
from .corpus import load_chunks, load_corpus_dir, pack_corpus, save_chunks, synthetic_corpus
from .distill import TrainConfig, train, validation_loss, weight_average
from .harness.cost import check_reference_budgets, check_reference_costs, family_cost_summary
from .harness.experiment import ExperimentSpec, run_experiment
from .harness.pareto import ParetoPoint, pareto_front
from .harness.plots import render_report_figures
from .harness.tasks import TASK_NAMES, eval_tasks, task_corpus, task_suite
from .logitstore import generate_logit_shards
from .model import DESK_PRESETS, FAMILY_PRESETS, ModelConfig, build_model, forward_batch
from .quant import (
    calib_hessian,
    capture_calibration,
    fuse_norms,
    load_quantized_model,
    parse_format,
    qad,
    quantize_model,
    save_quantized_model,
)

# ---- shared helpers ----


def _resolve_config(text: str) -> ModelConfig:
    """Accept a preset name or a path to a model-config JSON file."""
    if text in DESK_PRESETS:
        return DESK_PRESETS[text]
    if text in FAMILY_PRESETS:
        return FAMILY_PRESETS[text]
    if os.path.exists(text):
        with open(text) as fh:
            return ModelConfig.from_json(fh.read())
    known = ", ".join(sorted((*DESK_PRESETS, *FAMILY_PRESETS)))
    raise SystemExit(f"unknown model config {text!r}; expected a JSON file or one of: {known}")


def _load_params(path: str):
    """Load either a float checkpoint (.kdfc) or a quantized file (.kdqc)."""
    if path.endswith(".kdqc"):
        return load_quantized_model(path).to_params()
    return load_model(path)


def _load_chunk_subset(path: str, count: int | None, offset: int = 0):
    chunks = load_chunks(path)
    if offset:
        chunks = chunks[offset:]
    if count is not None:
        chunks = chunks[:count]
    if not chunks:
        raise SystemExit(f"no chunks selected from {path}")
    return chunks


# ---- subcommands ----


def cmd_synth_corpus(args) -> int:
    """Write a synthetic byte corpus as one file per document."""
    rng = np.random.default_rng(args.seed)
    n_task = int(args.tokens * args.task_fraction)
    docs = list(synthetic_corpus(args.tokens - n_task, seed=args.seed))
    if n_task > 0:
        docs.extend(task_corpus(n_task, seed=args.seed + 1))
    order = rng.permutation(len(docs))
    os.makedirs(args.out, exist_ok=True)
    total = 0
    for i, j in enumerate(order):
        doc = docs[j]
        total += len(doc)
        with open(os.path.join(args.out, f"doc-{i:06d}.txt"), "wb") as fh:
            fh.write(doc)
    print(f"wrote {len(docs)} documents, {total} bytes -> {args.out}")
    return 0


def cmd_pack(args) -> int:
    """Pack a corpus directory into fixed-length training chunks."""
    docs = load_corpus_dir(args.corpus)
    chunks = pack_corpus(docs, chunk_len=args.chunk_len)
    save_chunks(chunks, args.out)
    n_tok = sum(len(c.tokens) for c in chunks)
    print(f"packed {len(docs)} documents into {len(chunks)} chunks ({n_tok} tokens) -> {args.out}")
    return 0


def cmd_teacher_gen(args) -> int:
    """Record teacher top-k logits over a chunk file into a shard store."""
    teacher = _load_params(args.teacher)
    chunks = _load_chunk_subset(args.chunks, args.count)

    def logits_fn(tokens, boundaries):
        with Tape():
            return forward_batch(teacher, tokens, boundaries).data

    manifest = generate_logit_shards(
        chunks,
        logits_fn,
        args.out,
        vocab=teacher.config.vocab,
        k=args.k,
        tokens_per_shard=args.tokens_per_shard,
        perm_seed=args.perm_seed,
        batch_size=args.batch_size,
    )
    n_tokens = sum(s["tokens"] for s in manifest["shards"])
    print(f"wrote {len(manifest['shards'])} shards, {n_tokens} tokens -> {args.out}")
    return 0


def cmd_distill(args) -> int:
    """Train a student against a recorded logit store."""
    config = _resolve_config(args.student)
    val_chunks = None
    if args.val_chunks:
        val_chunks = _load_chunk_subset(args.val_chunks, args.val_count)
    train_config = TrainConfig(
        lr_peak=args.lr,
        global_batch=args.global_batch,
        total_iters=args.iters,
        lambda_kd=args.lambda_kd,
        seed=args.seed,
        checkpoint_interval=args.checkpoint_interval,
        val_interval=args.val_interval,
    )
    result = train(
        config,
        args.store,
        train_config,
        val_chunks=val_chunks,
        out_dir=args.out,
        resume=args.resume,
    )
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {args.iters} iters; final metrics: {json.dumps(last, sort_keys=True)}")
    if val_chunks is not None:
        print(f"validation loss: {validation_loss(result.params, val_chunks):.6f}")
    print(f"checkpoints under {args.out}")
    return 0


def cmd_quantize(args) -> int:
    """Quantize a checkpoint (or checkpoint average) into a .kdqc file."""
    if args.method == "gptq" and not args.calib_chunks:
        raise SystemExit("--method gptq requires --calib-chunks")
    if args.method == "qad" and not args.qad_store:
        raise SystemExit("--method qad requires --qad-store")
    try:
        fmt = parse_format(args.format)
    except ValueError as exc:
        raise SystemExit(str(exc)) from exc

    if args.avg_checkpoints:
        params = weight_average([load_model(p) for p in args.avg_checkpoints])
    else:
        params = _load_params(args.model)
    if args.fuse_norms:
        params = fuse_norms(params)

    if args.method == "gptq":
        chunks = _load_chunk_subset(args.calib_chunks, args.calib_count)
        inputs = capture_calibration(params, chunks)
        hessians = {name: calib_hessian(x) for name, x in inputs.items()}
        qmodel = quantize_model(params, fmt, method="gptq", hessians=hessians)
    elif args.method == "qad":
        teacher = _load_params(args.qad_teacher) if args.qad_teacher else None
        result = qad(
            params,
            fmt,
            args.qad_store,
            teacher=teacher,
            steps=args.qad_steps,
            lr=args.qad_lr,
            global_batch=args.qad_batch,
            seed=args.seed,
        )
        qmodel = quantize_model(result.params, fmt, method="rtn", meta={"method": "qad"})
    else:
        qmodel = quantize_model(params, fmt, method="rtn")

    save_quantized_model(qmodel, args.out)
    print(f"quantized to {args.format} via {args.method}: {qmodel.storage_bytes} payload bytes -> {args.out}")
    return 0


def cmd_cost(args) -> int:
    """Print the reference cost table, token budgets, and family summary."""
    print(f"{'run':<16} {'estimate':>12} {'target':>12} {'rel err':>8}")
    for row in check_reference_costs():
        print(f"{row['label']:<16} {row['estimate']:>12.3e} {row['target']:>12.1e} {row['rel_err']:>7.2%}")
    print()
    print(f"{'schedule':<16} {'tokens':>12} {'2 s.f.':>10} {'dev':>8}")
    for row in check_reference_budgets():
        print(
            f"{row['label']:<16} {row['tokens']:>12.4e} {row['rounded_2sf']:>10.1e}"
            f" {row['rel_dev_from_median']:>7.2%}"
        )
    print()
    fam = family_cost_summary()
    print(f"student training: {fam['student_macs']:.3e} MACs")
    print(f"logit generation: {fam['logits_macs']:.3e} MACs")
    print(f"family total:     {fam['family_total_macs']:.3e} MACs")
    print(
        f"vs full pre-training ({fam['full_pretrain_target']:.1e}):"
        f" {fam['fraction_of_target']:.2%}"
    )
    return 0


def cmd_eval(args) -> int:
    """Evaluate a checkpoint: validation loss and/or task accuracies."""
    params = _load_params(args.model)
    did_something = False
    if args.val_chunks:
        chunks = _load_chunk_subset(args.val_chunks, args.val_count)
        print(f"val_loss: {validation_loss(params, chunks):.6f}")
        did_something = True
    if args.suite:
        names = tuple(args.suite.split(","))
        suite = task_suite(names, n_examples=args.examples, seed=args.seed)
        accs = eval_tasks(params, suite)
        for (name, _), acc in zip(suite, accs):
            print(f"task {name}: {acc:.4f}")
        print(f"task_macro: {float(np.mean(accs)):.4f}")
        did_something = True
    if not did_something:
        raise SystemExit("nothing to evaluate; pass --val-chunks and/or --suite")
    return 0


def cmd_pareto(args) -> int:
    """Extract the non-dominated frontier from a report CSV."""
    import csv as csvmod

    with open(args.report, newline="") as fh:
        rows = list(csvmod.DictReader(fh))
    points = []
    for row in rows:
        if row.get("error"):
            continue
        cost = row.get("storage_bytes" if args.axis == "storage" else "macs")
        if not cost:
            continue
        if row.get("task_macro"):
            quality = float(row["task_macro"])
        elif row.get("val_loss"):
            quality = -float(row["val_loss"])
        else:
            continue
        points.append(ParetoPoint(label=row["label"], cost=float(cost), quality=quality))
    if not points:
        raise SystemExit(f"no usable rows in {args.report}")
    front = pareto_front(points)
    lines = ["label,cost,quality"]
    lines += [f"{p.label},{p.cost!r},{p.quality!r}" for p in front]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")
    print(f"frontier: {len(front)} of {len(points)} points", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    """Run an experiment grid from a JSON spec and write the report."""
    spec = ExperimentSpec.load(args.spec)
    report = run_experiment(spec, args.out)
    if not args.no_figures:
        report.figure_paths = render_report_figures(report.rows, args.out)
    n_fail = len(report.failed)
    print(f"report: {len(report.rows)} rows ({n_fail} failed) -> {report.csv_path}")
    for path in report.figure_paths:
        print(f"figure: {path}")
    for row in report.failed:
        print(f"FAILED {row.label}: {row.error}", file=sys.stderr)
    return 1 if n_fail else 0


# ---- argument parsing ----


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="write a synthetic byte corpus directory")
    p.add_argument("--tokens", type=int, required=True, help="total corpus size in tokens (bytes)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory, one file per document")
    p.add_argument("--task-fraction", type=float, default=0.0, help="fraction drawn from the task generator")
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("pack", help="pack a corpus directory into fixed-length chunks")
    p.add_argument("--corpus", required=True)
    p.add_argument("--chunk-len", type=int, required=True)
    p.add_argument("--out", required=True, help="output chunk file (.kdch)")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("teacher-gen", help="record teacher top-k logits into a shard store")
    p.add_argument("--chunks", required=True, help="chunk file (.kdch)")
    p.add_argument("--teacher", required=True, help="teacher checkpoint (.kdfc or .kdqc)")
    p.add_argument("--out", required=True, help="shard store directory")
    p.add_argument("--count", type=int, default=None, help="only record the first N chunks")
    p.add_argument("--k", type=int, default=256, help="top-k entries kept per token")
    p.add_argument("--tokens-per-shard", type=int, default=1 << 20)
    p.add_argument("--perm-seed", type=int, default=0, help="seed for the write-order permutation")
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_teacher_gen)

    p = sub.add_parser("distill", help="train a student against a recorded logit store")
    p.add_argument("--student", required=True, help="preset name or model-config JSON path")
    p.add_argument("--store", required=True, help="shard store directory or manifest path")
    p.add_argument("--out", required=True, help="run directory for checkpoints and metrics")
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--global-batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--lambda-kd", type=float, default=0.9, help="distillation weight in [0, 1]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-interval", type=int, default=1000)
    p.add_argument("--val-interval", type=int, default=0)
    p.add_argument("--val-chunks", default=None, help="chunk file for validation loss")
    p.add_argument("--val-count", type=int, default=None)
    p.add_argument("--resume", action="store_true", help="resume from the run directory")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("quantize", help="quantize a checkpoint into a .kdqc file")
    p.add_argument("--model", help="input checkpoint (.kdfc or .kdqc)")
    p.add_argument("--out", required=True)
    p.add_argument("--format", required=True, help="e.g. int4g64, int4g32sym, int3g64, fp8, nvfp4, bf16")
    p.add_argument("--method", choices=("rtn", "gptq", "qad"), default="rtn")
    p.add_argument("--fuse-norms", action="store_true", help="equalize projection columns into norm gains first")
    p.add_argument("--avg-checkpoints", nargs="+", default=None, help="average these checkpoints instead of --model")
    p.add_argument("--calib-chunks", default=None, help="chunk file for calibration (gptq)")
    p.add_argument("--calib-count", type=int, default=32)
    p.add_argument("--qad-store", default=None, help="logit store for distillation-guided recovery (qad)")
    p.add_argument("--qad-teacher", default=None, help="optional teacher checkpoint for on-the-fly logits")
    p.add_argument("--qad-steps", type=int, default=100)
    p.add_argument("--qad-lr", type=float, default=1e-4)
    p.add_argument("--qad-batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("cost", help="print the reference cost table and family summary")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out chunks and/or tasks")
    p.add_argument("--model", required=True, help="checkpoint (.kdfc or .kdqc)")
    p.add_argument("--val-chunks", default=None)
    p.add_argument("--val-count", type=int, default=None)
    p.add_argument("--suite", default=",".join(TASK_NAMES), help="comma-separated task names ('' to skip)")
    p.add_argument("--examples", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pareto", help="extract the cost/quality frontier from a report CSV")
    p.add_argument("--report", required=True, help="report.csv from the report subcommand")
    p.add_argument("--axis", choices=("storage", "macs"), default="storage")
    p.add_argument("--out", default=None, help="optional frontier CSV path")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("report", help="run an experiment grid from a JSON spec")
    p.add_argument("--spec", required=True, help="experiment spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "quantize" and not args.model and not args.avg_checkpoints:
        raise SystemExit("quantize requires --model or --avg-checkpoints")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
