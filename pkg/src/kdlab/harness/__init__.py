"""Experiment orchestration: cost model, synthetic tasks, Pareto analysis, reports."""

from .cost import (
    COST_LABEL,
    CostEntry,
    REFERENCE_COSTS,
    REFERENCE_BUDGETS,
    check_reference_costs,
    check_reference_budgets,
    estimate_cost,
    family_cost_summary,
    round_sig_decimal,
)
from .pareto import ParetoPoint, pareto_front
from .tasks import (
    TASK_NAMES,
    TaskInstance,
    eval_tasks,
    make_task,
    task_corpus,
    task_suite,
)
from .experiment import ExperimentSpec, Report, ReportRow, run_experiment
from .plots import render_report_figures

__all__ = [
    "COST_LABEL",
    "CostEntry",
    "REFERENCE_COSTS",
    "REFERENCE_BUDGETS",
    "check_reference_costs",
    "check_reference_budgets",
    "estimate_cost",
    "family_cost_summary",
    "round_sig_decimal",
    "ParetoPoint",
    "pareto_front",
    "TASK_NAMES",
    "TaskInstance",
    "eval_tasks",
    "make_task",
    "task_corpus",
    "task_suite",
    "ExperimentSpec",
    "Report",
    "ReportRow",
    "run_experiment",
    "render_report_figures",
]
