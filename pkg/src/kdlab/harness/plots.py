"""Figure rendering for experiment reports (headless matplotlib backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402 - backend must be pinned first

from .experiment import ReportRow
from .pareto import ParetoPoint, pareto_front

__all__ = ["render_report_figures", "render_pareto_figure"]


def _points(rows: Sequence[ReportRow], cost_attr: str) -> list[ParetoPoint]:
    pts = []
    for r in rows:
        cost = getattr(r, cost_attr)
        if r.error or cost is None:
            continue
        quality = r.task_macro if r.task_macro is not None else (
            -r.val_loss if r.val_loss is not None else None
        )
        if quality is None:
            continue
        pts.append(ParetoPoint(r.label, float(cost), float(quality)))
    return pts


def render_pareto_figure(
    points: Sequence[ParetoPoint], path, *, xlabel: str, ylabel: str
) -> Path:
    """Scatter every point and draw the frontier as a step line."""
    front = pareto_front(list(points))
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    dominated = [p for p in points if p.dominated]
    ax.scatter(
        [p.cost for p in dominated], [p.quality for p in dominated],
        s=28, color="0.65", label="dominated",
    )
    ax.scatter(
        [p.cost for p in front], [p.quality for p in front],
        s=42, color="tab:red", zorder=3, label="frontier",
    )
    ax.step(
        [p.cost for p in front], [p.quality for p in front],
        where="post", color="tab:red", linewidth=1.0, alpha=0.7,
    )
    for p in points:
        ax.annotate(p.label, (p.cost, p.quality), fontsize=6,
                    textcoords="offset points", xytext=(3, 3))
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_xscale("log")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_report_figures(rows: Sequence[ReportRow], out_dir) -> list[Path]:
    """Cost-vs-quality scatter per cost axis; skipped when no plottable rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    made: list[Path] = []
    for cost_attr, fname, xlabel in (
        ("storage_bytes", "pareto-storage.png", "checkpoint payload (bytes)"),
        ("macs", "pareto-macs.png", "forward MACs per token"),
    ):
        pts = _points(rows, cost_attr)
        if not pts:
            continue
        ylabel = "task macro accuracy" if any(
            r.task_macro is not None for r in rows
        ) else "negated validation loss"
        made.append(
            render_pareto_figure(pts, out_dir / fname, xlabel=xlabel, ylabel=ylabel)
        )
    return made
