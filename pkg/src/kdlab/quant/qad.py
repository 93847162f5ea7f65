"""Recovery training with straight-through fake-quantized weights.

Every forward pass re-quantizes the latent projection weights; gradients pass
straight through the rounding except (optionally) where a value fell off the
end of the grid, where they are zeroed. The objective is the same blended
sparse-KL / cross-entropy loss the distillation trainer uses, with a cosine
learning-rate decay over the (short) recovery run. The function returns the
latent weights; rounding them once more yields the deliverable, which
therefore lies exactly on the format grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import NonFiniteError, Tape, Tensor
from ..distill import (
    TrainConfig,
    _batch_arrays,
    _cycle_blocks,
    init_optimizer_state,
    kd_loss_terms,
    optimizer_step,
)
from ..logitstore import load_manifest, topk_sparsify
from ..model import ModelParams, forward_batch
from .formats import QuantAux, QuantFormat, apply_aux, compute_aux, fake_quant

DIVERGENCE_FACTOR = 2.0
DIVERGENCE_PATIENCE = 100

__all__ = [
    "ste_fake_quant",
    "quantized_forward",
    "fake_quant_weights",
    "make_act_transform",
    "qad",
    "QADResult",
    "recovery",
]


# ---------------------------------------------------------------- STE


def ste_fake_quant(
    w: Tensor,
    fmt: QuantFormat,
    aux: QuantAux | None = None,
    clip_gradient: bool = True,
) -> Tensor:
    """Fake-quantize a weight Tensor with a straight-through backward.

    With clip_gradient on, elements whose nearest pre-clamp code fell outside
    the code range get zero gradient; everything else passes through
    unchanged. Passing `aux` pins the lattice (otherwise derived from w, in
    which case nothing clips).
    """
    if aux is None:
        aux = compute_aux(w.data, fmt)
    _, y, clipped = apply_aux(w.data, aux)
    mask = (~clipped).astype(np.float32)

    def bwd(g):
        return ((g * mask).astype(np.float32) if clip_gradient else g,)

    def fwd(wd):
        return apply_aux(wd, aux)[1]

    return ad.record("ste_fake_quant", y, (w,), bwd, fwd)


def quantized_forward(
    params: ModelParams,
    tokens: np.ndarray,
    boundaries=None,
    *,
    fmt: QuantFormat,
    clip_gradient: bool = True,
) -> Tensor:
    """Forward pass that re-quantizes every projection weight on the fly."""

    def hook(name: str, t: Tensor) -> Tensor:
        return ste_fake_quant(t, fmt, clip_gradient=clip_gradient)

    return forward_batch(params, tokens, boundaries, weight_transform=hook)


def fake_quant_weights(params: ModelParams, fmt: QuantFormat) -> ModelParams:
    """Copy of params with every projection weight rounded onto the grid."""
    out = params.copy()
    for name in out.projection_names():
        t = out.tensor(name)
        t.data[...] = fake_quant(t.data, fmt)
    return out


def make_act_transform(fmt: QuantFormat):
    """Per-tensor dynamic fake-quant hook for projection inputs, or None.

    Used at evaluation time for weight+activation formats; the batch's own
    absmax sets the scale.
    """
    if fmt.scope != "weight+activation":
        return None

    def hook(name: str, t: Tensor) -> Tensor:
        flat = t.data.reshape(-1, t.data.shape[-1])
        if fmt.kind == "fp8_e4m3":
            rows = flat.reshape(1, -1)  # one scale for the whole tensor
            y = fake_quant(rows, fmt).reshape(t.data.shape)
        else:
            y = fake_quant(flat, fmt).reshape(t.data.shape)

        def bwd(g):
            return (g,)

        def fwd(xd):
            return y

        return ad.record("act_fake_quant", y, (t,), bwd, fwd)

    return hook


# ---------------------------------------------------------------- recovery run


@dataclass
class QADResult:
    params: ModelParams        # latent weights; round once more to deliver
    losses: list[float]


def qad(
    params: ModelParams,
    fmt: QuantFormat,
    manifest_path,
    teacher: ModelParams | None = None,
    steps: int = 0,
    lr: float = 1e-4,
    *,
    global_batch: int = 8,
    lambda_kd: float = 0.9,
    weight_decay: float = 0.0,
    top_k: int = 64,
    clip_gradient: bool = True,
    seed: int = 0,
) -> QADResult:
    """Short quantization-aware recovery stage on a fully-trained model.

    Streams token chunks from the store manifest; targets come from the
    stored sparse records, or are recomputed on the fly when a live teacher
    is given. steps = 0 leaves the weights untouched, so the deliverable is
    exactly the plain-rounding baseline. Aborts if the loss stays above twice
    its initial value for 100 consecutive steps.
    """
    manifest = load_manifest(manifest_path)
    if manifest["vocab"] != params.config.vocab:
        raise ValueError("manifest vocab does not match model vocab")
    if teacher is not None and teacher.config.vocab != params.config.vocab:
        raise ValueError("teacher and student vocabs differ")

    latent = params.copy()
    trainable = latent.trainable()
    state = init_optimizer_state(trainable)
    opt_cfg = TrainConfig(
        lr_peak=max(lr, 1e-30),
        global_batch=global_batch,
        total_iters=max(steps, 1),
        warmup_iters=0,
        decay_start_iter=0,
        weight_decay=weight_decay,
        lambda_kd=lambda_kd,
        seed=seed,
    )
    blocks = _cycle_blocks(manifest_path)

    losses: list[float] = []
    initial = None
    patience = 0
    for step in range(steps):
        batch = [next(blocks) for _ in range(global_batch)]
        toks, bnds, labels, valid, idx, prb = _batch_arrays(batch)
        if teacher is not None:
            t_logits = forward_batch(teacher, toks, bnds).data
            z = t_logits - t_logits.max(axis=-1, keepdims=True)
            e = np.exp(z, dtype=np.float32)
            idx, prb = topk_sparsify(e / e.sum(axis=-1, keepdims=True), top_k)
        lr_t = lr * 0.5 * (1.0 + math.cos(math.pi * step / steps))
        try:
            with Tape() as tape:
                logits = quantized_forward(
                    latent, toks, bnds, fmt=fmt, clip_gradient=clip_gradient
                )
                loss, _, _ = kd_loss_terms(logits, idx, prb, labels, valid, lambda_kd)
            grads = ad.backward(tape, loss, trainable)
            optimizer_step(trainable, grads, state, opt_cfg, lr_t)
        except NonFiniteError as e:
            raise NonFiniteError(f"recovery step {step + 1}: {e}") from e
        val = float(loss.data)
        losses.append(val)
        if initial is None:
            initial = val
        patience = patience + 1 if val > DIVERGENCE_FACTOR * initial else 0
        if patience >= DIVERGENCE_PATIENCE:
            raise RuntimeError(
                f"recovery training diverged: loss > {DIVERGENCE_FACTOR}x initial "
                f"for {DIVERGENCE_PATIENCE} consecutive steps (step {step + 1})"
            )
    return QADResult(latent, losses)


# ---------------------------------------------------------------- scoring


def recovery(baseline_scores: Sequence[float], quant_scores: Sequence[float]) -> float:
    """100 * macro-mean(quant) / macro-mean(baseline)."""
    if len(baseline_scores) != len(quant_scores):
        raise ValueError("score lists cover different task sets")
    if not baseline_scores:
        raise ValueError("empty score lists")
    base = float(np.mean(baseline_scores))
    if base == 0:
        raise ValueError("baseline macro-mean is zero")
    return 100.0 * float(np.mean(quant_scores)) / base
