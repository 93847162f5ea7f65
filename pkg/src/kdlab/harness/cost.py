"""Compute-cost accounting under the N-times-T MAC convention.

One training token costs 3 multiply-accumulates per parameter (forward plus
roughly twice that for backward); one forward-only token costs 1. Totals are
reported in MAC units under the label "FLOPs(NT-convention)": the reference
ledger below rounds to 2 significant figures under MAC counting, not under
2-FLOPs-per-MAC counting, and the rule must reproduce every entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

MACS_PER_TRAIN_TOKEN = 3
MACS_PER_FORWARD_TOKEN = 1
COST_LABEL = "FLOPs(NT-convention)"

__all__ = [
    "COST_LABEL",
    "MACS_PER_TRAIN_TOKEN",
    "MACS_PER_FORWARD_TOKEN",
    "CostEntry",
    "ScheduleBudget",
    "REFERENCE_COSTS",
    "REFERENCE_BUDGETS",
    "estimate_cost",
    "round_sig_decimal",
    "check_reference_costs",
    "check_reference_budgets",
    "family_cost_summary",
]


def estimate_cost(n_params: float, tokens: float, mode: str) -> float:
    """Total MACs for running `tokens` through an `n_params` model.

    mode "train" counts forward and backward (3 * N * T); mode "forward"
    counts logits generation only (1 * N * T).
    """
    if n_params <= 0 or tokens <= 0:
        raise ValueError("n_params and tokens must be positive")
    if mode == "train":
        return MACS_PER_TRAIN_TOKEN * n_params * tokens
    if mode == "forward":
        return MACS_PER_FORWARD_TOKEN * n_params * tokens
    raise ValueError(f"unknown mode {mode!r} (expected train or forward)")


@dataclass(frozen=True)
class CostEntry:
    """One accounted stage; macs defaults to the rule's value for its mode."""

    label: str
    n_params: float
    tokens: float
    mode: str           # "train" | "forward"
    macs: float | None = None

    def __post_init__(self):
        expected = estimate_cost(self.n_params, self.tokens, self.mode)
        if self.macs is None:
            object.__setattr__(self, "macs", expected)
        elif self.macs != expected:
            raise ValueError(
                f"{self.label}: macs {self.macs:.3e} != "
                f"{MACS_PER_TRAIN_TOKEN if self.mode == 'train' else 1}*N*T = {expected:.3e}"
            )


# ---------------------------------------------------------------- references

# (label, compute-size params, token budget, mode, rounded MAC total). The
# first five rows are this family's stages: the full-size 8B pre-training the
# students descend from, the one-off 8B forward pass that generates the
# stored logits, and the three student distillation runs. The last four are
# standalone pre-training budgets of comparable-scale external models, with
# compute-relevant parameter counts taken from their public architectures.
REFERENCE_COSTS: tuple[tuple[str, float, float, str, float], ...] = (
    ("pretrain-8b", 8.1e9, 15e12, "train", 3.7e23),
    ("logits-gen-8b", 8.1e9, 1.7e12, "forward", 1.4e22),
    ("distill-0.5b", 0.4e9, 1.7e12, "train", 0.2e22),
    ("distill-1.5b", 1.5e9, 1.7e12, "train", 0.8e22),
    ("distill-4b", 3.8e9, 1.7e12, "train", 2.0e22),
    ("external-0.6b", 0.596e9, 36e12, "train", 6.5e22),
    ("external-1.7b-a", 1.40e9, 4e12, "train", 1.7e22),
    ("external-1.7b-b", 1.71e9, 11e12, "train", 5.6e22),
    ("external-3b", 3.08e9, 11e12, "train", 9.9e22),
)


@dataclass(frozen=True)
class ScheduleBudget:
    """Published per-student schedule; tokens = batch * seq_len * iters."""

    label: str
    lr_peak: float
    global_batch: int
    seq_len: int
    iters: int

    @property
    def tokens(self) -> int:
        return self.global_batch * self.seq_len * self.iters


# The three student schedules all land on the same ~1.7e12-token budget.
REFERENCE_BUDGETS: tuple[ScheduleBudget, ...] = (
    ScheduleBudget("distill-0.5b", 6e-4, 512, 4096, 800_000),
    ScheduleBudget("distill-1.5b", 3e-4, 512, 4096, 800_000),
    ScheduleBudget("distill-4b", 2e-4, 1024, 4096, 400_000),
)


def round_sig_decimal(x: float, digits: int = 2) -> float:
    """Round to `digits` significant decimal figures. (0 stays 0.)"""
    if x == 0:
        return 0.0
    exp = math.floor(math.log10(abs(x)))
    scale = 10.0 ** (exp - digits + 1)
    return round(x / scale) * scale


def check_reference_costs() -> list[dict]:
    """Per-row rule-vs-ledger comparison: label, estimate, target, rel_err."""
    rows = []
    for label, n, t, mode, target in REFERENCE_COSTS:
        est = estimate_cost(n, t, mode)
        rows.append(
            {
                "label": label,
                "estimate": est,
                "target": target,
                "rel_err": abs(est - target) / target,
            }
        )
    return rows


def check_reference_budgets() -> list[dict]:
    """Per-schedule token budget vs the 2-significant-figure family budget."""
    tokens = [b.tokens for b in REFERENCE_BUDGETS]
    median = sorted(tokens)[len(tokens) // 2]
    return [
        {
            "label": b.label,
            "tokens": b.tokens,
            "rounded_2sf": round_sig_decimal(float(b.tokens), 2),
            "rel_dev_from_median": abs(b.tokens - median) / median,
        }
        for b in REFERENCE_BUDGETS
    ]


def family_cost_summary() -> dict:
    """Family production cost vs the full-size pre-training it replaces.

    The family total (three student runs plus the shared logits-generation
    pass) must come in below 12% of the full 8B pre-training budget.
    """
    by_label = {r[0]: r for r in REFERENCE_COSTS}
    students = ["distill-0.5b", "distill-1.5b", "distill-4b"]
    student_macs = sum(
        estimate_cost(by_label[s][1], by_label[s][2], "train") for s in students
    )
    logits_macs = estimate_cost(*by_label["logits-gen-8b"][1:4])
    full = estimate_cost(*by_label["pretrain-8b"][1:4])
    total = student_macs + logits_macs
    return {
        "student_macs": student_macs,
        "logits_macs": logits_macs,
        "family_total_macs": total,
        "full_pretrain_macs": full,
        "full_pretrain_target": by_label["pretrain-8b"][4],
        "fraction_of_full": total / full,
        "fraction_of_target": total / by_label["pretrain-8b"][4],
    }
