"""Declarative experiment grids: models x formats x methods -> report rows.

A spec is JSON: {"models": [{"label", "checkpoint" | "checkpoints": [...]}],
"formats": [...], "methods": [...], "seeds": [...], "eval": {"suite",
"val_manifest", ...}}. Every grid cell quantizes a loaded checkpoint, writes
the quantized model file, and measures validation loss, task accuracies and
recovery against the unquantized baseline. Rows are independent of each
other (safe to farm out); assembly is a single merge in declaration order,
and a rerun with the same spec is byte-identical apart from rendered figures.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..checkpoint import load_model
from ..corpus import TokenChunk
from ..distill import validation_loss, weight_average
from ..logitstore import stream_shards
from ..model import ModelParams, count_params
from ..quant import fuse_norms, parse_format
from ..quant.formats import QuantFormat
from ..quant.ptq import calib_hessian, capture_calibration
from ..quant.qad import fake_quant_weights, qad
from ..quant.store import load_quantized_model, quantize_model, save_quantized_model
from .cost import estimate_cost
from .tasks import eval_tasks, task_suite

REPORT_COLUMNS = ("label", "storage_bytes", "macs", "val_loss", "task_macro", "recovery", "error")
METHODS = ("rtn", "gptq", "qad")

__all__ = ["ExperimentSpec", "ReportRow", "Report", "run_experiment", "REPORT_COLUMNS"]


# ---------------------------------------------------------------- spec


@dataclass(frozen=True)
class ExperimentSpec:
    """Validated grid declaration; see module docstring for the JSON shape."""

    models: tuple[dict, ...]
    formats: tuple[str, ...]
    methods: tuple[str, ...]
    seeds: tuple[int, ...]
    eval: dict

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        raw = json.loads(text)
        for key in ("models", "formats", "methods", "seeds", "eval"):
            if key not in raw:
                raise ValueError(f"experiment spec missing {key!r}")
        for m in raw["models"]:
            if "label" not in m or not ("checkpoint" in m or "checkpoints" in m):
                raise ValueError(f"model entry needs label and checkpoint(s): {m}")
        for m in raw["methods"]:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r} (expected one of {METHODS})")
        for f in raw["formats"]:
            parse_format(f)
        if "val_manifest" not in raw["eval"]:
            raise ValueError("eval section needs val_manifest")
        return cls(
            tuple(raw["models"]),
            tuple(raw["formats"]),
            tuple(raw["methods"]),
            tuple(int(s) for s in raw["seeds"]),
            dict(raw["eval"]),
        )

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_json(Path(path).read_text())


@dataclass
class ReportRow:
    label: str
    storage_bytes: int | None = None
    macs: float | None = None
    val_loss: float | None = None
    task_macro: float | None = None
    recovery: float | None = None
    error: str = ""

    def as_dict(self) -> dict:
        return {c: getattr(self, c) for c in REPORT_COLUMNS}


@dataclass
class Report:
    rows: list[ReportRow]
    csv_path: Path | None = None
    json_path: Path | None = None
    figure_paths: list[Path] = field(default_factory=list)

    @property
    def failed(self) -> list[ReportRow]:
        return [r for r in self.rows if r.error]


# ---------------------------------------------------------------- helpers


def _fmt_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(rows: Sequence[ReportRow]) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt_cell(getattr(row, c)) for c in REPORT_COLUMNS))
    return "\n".join(lines) + "\n"


def _load_val_chunks(manifest_path, limit: int | None) -> list[TokenChunk]:
    chunks: list[TokenChunk] = []
    for block in stream_shards(manifest_path, prefetch=False):
        chunks.append(block.chunk)
        if limit is not None and len(chunks) >= limit:
            break
    if not chunks:
        raise ValueError(f"no chunks available under {manifest_path}")
    return chunks


def _load_base_params(entry: dict) -> ModelParams:
    if "checkpoints" in entry:
        return weight_average([load_model(p) for p in entry["checkpoints"]])
    return load_model(entry["checkpoint"])


def _quantize_for_row(
    params: ModelParams,
    fmt: QuantFormat,
    method: str,
    seed: int,
    ev: dict,
    calib_chunks: list[TokenChunk],
):
    """Quantized model for one grid cell (QAD falls back to rounded latent)."""
    if method == "rtn" or fmt.kind == "bf16":
        return quantize_model(params, fmt, "rtn")
    if method == "gptq":
        calib = capture_calibration(params, calib_chunks)
        hessians = {name: calib_hessian(x) for name, x in calib.items()}
        return quantize_model(params, fmt, "gptq", hessians=hessians)
    opts = ev.get("qad", {})
    teacher = load_model(opts["teacher"]) if "teacher" in opts else None
    manifest = opts.get("train_manifest") or ev.get("train_manifest") or ev["val_manifest"]
    result = qad(
        params,
        fmt,
        manifest,
        teacher=teacher,
        steps=int(opts.get("steps", 50)),
        lr=float(opts.get("lr", 1e-4)),
        global_batch=int(opts.get("global_batch", 8)),
        top_k=int(opts.get("top_k", 64)),
        seed=seed,
    )
    return quantize_model(fake_quant_weights(result.params, fmt), fmt, "rtn")


def _row_label(model: str, fmt: QuantFormat, method: str, seed: int, many_seeds: bool) -> str:
    parts = [model, fmt.name]
    if fmt.kind != "bf16":
        parts.append(method)
    if many_seeds:
        parts.append(f"s{seed}")
    return "-".join(parts)


# ---------------------------------------------------------------- runner


def run_experiment(spec: ExperimentSpec | str | Path, out_dir) -> Report:
    """Execute the grid, write report.csv / report.json, return the report.

    Each row's storage_bytes is read back from the quantized file it wrote
    (payload only, headers excluded), so the column always matches what is
    actually on disk. Per-row failures land in the error column; the other
    cells stay empty and the remaining rows still run.
    """
    if not isinstance(spec, ExperimentSpec):
        spec = ExperimentSpec.load(spec)
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "quantized"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    ev = spec.eval
    val_chunks = _load_val_chunks(ev["val_manifest"], ev.get("val_chunks"))
    calib_chunks = val_chunks[: int(ev.get("calib_chunks", min(16, len(val_chunks))))]
    suite = task_suite(
        tuple(ev.get("suite", ())),
        n_examples=int(ev.get("n_examples", 32)),
        seed=int(ev.get("task_seed", 0)),
    ) if ev.get("suite") else None

    rows: list[ReportRow] = []
    many_seeds = len(spec.seeds) > 1
    for entry in spec.models:
        base_label = entry["label"]
        cells = [
            (parse_format(f), m, s)
            for f, m, s in itertools.product(spec.formats, spec.methods, spec.seeds)
        ]
        # 16-bit passthrough is method-independent; keep one row per seed
        cells = [
            (fmt, m, s)
            for fmt, m, s in cells
            if fmt.kind != "bf16" or m == spec.methods[0]
        ]
        try:
            base = _load_base_params(entry)
            if ev.get("fuse_norms"):
                base = fuse_norms(base)
            base_val = validation_loss(base, val_chunks)
            base_macro = (
                float(np.mean(eval_tasks(base, suite))) if suite is not None else None
            )
            n_params = count_params(base.config).total
        except Exception as exc:  # noqa: BLE001 - baseline failure fails the whole model
            rows.extend(
                ReportRow(_row_label(base_label, fmt, m, s, many_seeds), error=f"baseline: {exc}")
                for fmt, m, s in cells
            )
            continue

        rows.append(_baseline_row(base, base_label, n_params, base_val, base_macro))
        for fmt, method, seed in cells:
            label = _row_label(base_label, fmt, method, seed, many_seeds)
            row = ReportRow(label)
            try:
                qm = _quantize_for_row(base, fmt, method, seed, ev, calib_chunks)
                qm_path = ckpt_dir / f"{label}.kdqc"
                save_quantized_model(qm, qm_path)
                row.storage_bytes = _file_payload_bytes(qm_path)
                quant_params = load_quantized_model(qm_path).to_params()
                row.macs = estimate_cost(n_params, 1, "forward")
                row.val_loss = validation_loss(quant_params, val_chunks)
                if suite is not None:
                    scores = eval_tasks(quant_params, suite)
                    row.task_macro = float(np.mean(scores))
                    if base_macro:
                        row.recovery = 100.0 * row.task_macro / base_macro
            except Exception as exc:  # noqa: BLE001 - reported per row
                row.error = str(exc)
            rows.append(row)

    report = Report(rows)
    report.csv_path = out_dir / "report.csv"
    report.csv_path.write_text(render_csv(rows))
    report.json_path = out_dir / "report.json"
    report.json_path.write_text(
        json.dumps([r.as_dict() for r in rows], indent=2, sort_keys=True) + "\n"
    )
    return report


def _file_payload_bytes(path) -> int:
    """Payload size of a quantized model file: total minus header/descriptor."""
    raw = Path(path).read_bytes()
    _, desc_len = struct.unpack_from("<II", raw, 4)
    return len(raw) - 12 - desc_len


def _baseline_row(
    base: ModelParams, label: str, n_params: int, val: float, macro: float | None
) -> ReportRow:
    row = ReportRow(f"{label}-fp32")
    row.storage_bytes = sum(
        t.data.nbytes for _, t in base.named_tensors(include_tied_head=False)
    )
    row.macs = estimate_cost(n_params, 1, "forward")
    row.val_loss = val
    row.task_macro = macro
    row.recovery = 100.0 if macro else None
    return row
