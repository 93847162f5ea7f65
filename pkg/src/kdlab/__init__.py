"""Desk-scale lab for logit distillation and post-training quantization.

Everything runs on numpy: a tape autodiff core, a GQA transformer, a
compressed sparse-logit store, a distillation trainer, weight quantizers
(round-to-nearest, error-compensated, and quantization-aware), and a harness
for cost accounting, synthetic evals, and Pareto reports.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
