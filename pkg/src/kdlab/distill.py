"""Trainer that matches a student to stored sparse teacher predictions.

The objective blends a sparse KL term against the teacher's retained top-K
probabilities (renormalized over the retained set) with plain next-token
cross-entropy, weighted lambda_kd / (1 - lambda_kd). The schedule is
warmup-stable-decay, the optimizer AdamW with decoupled decay. Training
streams shards from the logit store, logs a CSV, and emits checkpoints that
support bit-identical resume.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .checkpoint import load_model, load_train_state, save_model, save_train_state
from .corpus import TokenChunk
from .logitstore import LogitBlock, SparseLogitRecord, load_manifest, stream_shards
from .model import ModelConfig, ModelParams, build_model, forward_batch

METRICS_COLUMNS = ("iter", "lr", "train_loss", "kl_term", "ce_term", "val_loss", "tokens_seen")

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "TrainResult",
    "AdamState",
    "wsd_lr",
    "sparse_kd_loss",
    "kd_loss_terms",
    "optimizer_step",
    "register_optimizer",
    "init_optimizer_state",
    "train",
    "weight_average",
    "validation_loss",
]


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    """Run hyper-parameters; warmup/decay default to 1% and the last 20%."""

    lr_peak: float
    global_batch: int
    total_iters: int
    warmup_iters: int | None = None
    decay_start_iter: int | None = None
    lr_min_ratio: float = 0.1
    weight_decay: float = 0.0
    lambda_kd: float = 0.9
    optimizer: str = "adamw"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_interval: int = 1000
    log_interval: int = 10
    val_interval: int = 0

    def __post_init__(self):
        if self.warmup_iters is None:
            object.__setattr__(self, "warmup_iters", max(1, self.total_iters // 100))
        if self.decay_start_iter is None:
            object.__setattr__(self, "decay_start_iter", (self.total_iters * 4) // 5)
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")
        if not 0 <= self.lambda_kd <= 1:
            raise ValueError("lambda_kd must lie in [0, 1]")
        if not 0 <= self.warmup_iters <= self.decay_start_iter <= self.total_iters:
            raise ValueError(
                "need 0 <= warmup_iters <= decay_start_iter <= total_iters, got "
                f"{self.warmup_iters} / {self.decay_start_iter} / {self.total_iters}"
            )
        if self.global_batch < 1 or self.log_interval < 1:
            raise ValueError("global_batch and log_interval must be >= 1")
        if not 0 < self.lr_min_ratio <= 1:
            raise ValueError("lr_min_ratio must lie in (0, 1]")
        if self.optimizer not in _OPTIMIZERS and self.optimizer != "ademamix-plugin":
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


def wsd_lr(step: int, config: TrainConfig) -> float:
    """Warmup-stable-decay learning rate at `step` in [0, total_iters]."""
    total = config.total_iters
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm, decay_start = config.warmup_iters, config.decay_start_iter
    peak = config.lr_peak
    if step < warm:
        return peak * step / warm
    if step <= decay_start or decay_start == total:
        return peak
    frac = (step - decay_start) / (total - decay_start)
    return peak * (1.0 - (1.0 - config.lr_min_ratio) * frac)


# ---------------------------------------------------------------- loss


def kd_loss_terms(
    logits: Tensor,
    indices: np.ndarray,
    probs: np.ndarray,
    labels: np.ndarray,
    valid: np.ndarray,
    lambda_kd: float,
) -> tuple[Tensor, float, float]:
    """Mean blended loss over valid positions of a (B, T, vocab) batch.

    Returns (loss, mean KL term, mean CE term); the KL term is skipped
    entirely at lambda_kd = 0, so the loss is then the exact cross-entropy.
    """
    dtype = logits.data.dtype
    valid = np.asarray(valid, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid target positions in batch")
    w = (valid / n_valid).astype(dtype)

    lsm = ad.log_softmax(logits)

    kl_term = None
    kl_value = 0.0
    if lambda_kd > 0:
        p = np.asarray(probs, dtype=dtype)
        mass = p.sum(axis=-1)
        if (mass[valid] <= 0).any():
            raise ValueError("zero renormalization mass in sparse record")
        p = p / np.where(mass > 0, mass, 1.0)[..., None]
        q_s = ad.take_along(lsm, np.asarray(indices, dtype=np.int64))
        cross = ad.tsum(ad.mul(q_s, ad.tensor(-(p * w[..., None]), dtype=dtype)))
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=-1)
        kl_term = ad.add_const(cross, float((plogp * w).sum()))
        kl_value = float(kl_term.data)

    lab = np.where(valid, labels, 0).astype(np.int64)[..., None]
    ce_term = ad.tsum(ad.mul(ad.take_along(lsm, lab), ad.tensor(-w[..., None], dtype=dtype)))
    ce_value = float(ce_term.data)

    if lambda_kd == 0:
        return ce_term, kl_value, ce_value
    if lambda_kd == 1:
        return kl_term, kl_value, ce_value
    loss = ad.add(ad.scale(kl_term, lambda_kd), ad.scale(ce_term, 1.0 - lambda_kd))
    return loss, kl_value, ce_value


def sparse_kd_loss(
    student_logits: Tensor | np.ndarray,
    record: SparseLogitRecord,
    label: int,
    lambda_kd: float,
) -> Tensor:
    """Blended loss for a single position (vocab-sized logits, one record)."""
    t = student_logits if isinstance(student_logits, Tensor) else ad.tensor(student_logits)
    if t.data.ndim != 1:
        raise ValueError("single-position loss expects 1-D logits")
    vocab = t.data.shape[0]
    if not 0 <= label < vocab:
        raise ValueError(f"label {label} outside vocab {vocab}")
    wide = ad.reshape(t, (1, 1, vocab))
    loss, _, _ = kd_loss_terms(
        wide,
        np.asarray(record.indices)[None, None, :],
        np.asarray(record.probs)[None, None, :],
        np.array([[label]]),
        np.ones((1, 1), dtype=bool),
        lambda_kd,
    )
    return loss


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    """First/second moments per parameter, in parameter order."""

    step: int = 0
    moments: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def copy(self) -> "AdamState":
        return AdamState(self.step, [(m.copy(), v.copy()) for m, v in self.moments])


def init_optimizer_state(params: Sequence[Tensor]) -> AdamState:
    return AdamState(0, [(np.zeros_like(p.data), np.zeros_like(p.data)) for p in params])


def _adamw_step(
    params: Sequence[Tensor],
    grads: dict[Tensor, np.ndarray],
    state: AdamState,
    config: TrainConfig,
    lr: float,
) -> None:
    """In-place AdamW: decoupled multiplicative decay, bias-corrected moments."""
    state.step += 1
    t = state.step
    c1 = 1.0 - config.beta1 ** t
    c2 = 1.0 - config.beta2 ** t
    for i, p in enumerate(params):
        g = grads[p]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(
                f"non-finite gradient for {p.name or f'param[{i}]'} at optimizer step {t}"
            )
        if config.weight_decay:
            p.data *= 1.0 - lr * config.weight_decay
        m, v = state.moments[i]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.data.dtype)


_OPTIMIZERS: dict[str, Callable] = {"adamw": _adamw_step}


def register_optimizer(name: str, step_fn: Callable) -> None:
    """Add an optimizer under `name`; signature (params, grads, state, config, lr)."""
    _OPTIMIZERS[name] = step_fn


def optimizer_step(
    params: Sequence[Tensor],
    grads: dict[Tensor, np.ndarray],
    state: AdamState,
    config: TrainConfig,
    lr: float,
) -> None:
    fn = _OPTIMIZERS.get(config.optimizer)
    if fn is None:
        raise KeyError(
            f"optimizer {config.optimizer!r} has no registered implementation; "
            "provide one via register_optimizer()"
        )
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    fn(params, grads, state, config, lr)


# ---------------------------------------------------------------- training


@dataclass
class Checkpoint:
    """Model + optimizer snapshot after `iteration` completed steps."""

    iteration: int
    params: ModelParams
    state: AdamState
    model_path: Path | None = None
    state_path: Path | None = None


@dataclass
class TrainResult:
    params: ModelParams
    checkpoints: list[Checkpoint]
    metrics: list[dict]
    metrics_path: Path | None


def _batch_arrays(blocks: Sequence[LogitBlock]):
    toks = np.stack([b.chunk.tokens for b in blocks])
    bnds = [b.chunk.doc_boundaries for b in blocks]
    valid = np.stack([b.chunk.valid_target_mask() for b in blocks])
    labels = np.zeros_like(toks)
    labels[:, :-1] = toks[:, 1:]
    idx = np.stack([b.indices for b in blocks])
    prb = np.stack([b.probs for b in blocks])
    return toks, bnds, labels, valid, idx, prb


def _cycle_blocks(manifest_path) -> Iterator[LogitBlock]:
    while True:
        yield from stream_shards(manifest_path)


def _format_metric(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def train(
    student_config: ModelConfig,
    manifest_path,
    train_config: TrainConfig,
    val_chunks: Sequence[TokenChunk] | None = None,
    out_dir=None,
    *,
    resume: bool = False,
    stop_iter: int | None = None,
    init_params: ModelParams | None = None,
) -> TrainResult:
    """Run (or continue) a distillation run against a logit-store manifest.

    Streams shards sequentially, wrapping to a new epoch when exhausted.
    `stop_iter` halts early after that many completed iterations (simulating
    an interruption); calling again with resume=True picks up from the last
    checkpoint on disk and reproduces the uninterrupted run bit for bit.
    """
    tc = train_config
    manifest = load_manifest(manifest_path)
    if manifest["vocab"] != student_config.vocab:
        raise ValueError(
            f"manifest vocab {manifest['vocab']} != student vocab {student_config.vocab}"
        )
    chunk_len = manifest["chunk_len"]
    if chunk_len > student_config.seq_len:
        raise ValueError(
            f"manifest chunk_len {chunk_len} exceeds student seq_len {student_config.seq_len}"
        )

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    start_iter = 0
    state: AdamState | None = None
    params = init_params
    if resume:
        if out is None:
            raise ValueError("resume needs an out_dir with saved checkpoints")
        states = sorted(out.glob("state-*.kdts"))
        if states:
            state_path = states[-1]
            tag = state_path.stem.split("-")[1]
            params = load_model(out / f"ckpt-{tag}.kdfc")
            if params.config != student_config:
                raise ValueError("checkpoint config does not match student config")
            shapes = [t.data.shape for _, t in params.named_tensors(include_tied_head=False)]
            it, adam_step, moments = load_train_state(state_path, shapes)
            state = AdamState(adam_step, moments)
            start_iter = it
    if params is None:
        params = build_model(student_config, seed=tc.seed)
    trainable = params.trainable()
    if state is None:
        state = init_optimizer_state(trainable)

    metrics_path = out / "metrics.csv" if out is not None else None
    metrics_file = None
    if metrics_path is not None:
        fresh = not (resume and metrics_path.exists() and start_iter > 0)
        metrics_file = open(metrics_path, "w" if fresh else "a")
        if fresh:
            metrics_file.write(",".join(METRICS_COLUMNS) + "\n")

    blocks = _cycle_blocks(manifest_path)
    for _ in range(start_iter * tc.global_batch):  # fast-forward the stream
        next(blocks)

    end_iter = tc.total_iters if stop_iter is None else min(stop_iter, tc.total_iters)
    checkpoints: list[Checkpoint] = []
    rows: list[dict] = []
    val_loss: float | None = None
    try:
        for it in range(start_iter, end_iter):
            batch = [next(blocks) for _ in range(tc.global_batch)]
            toks, bnds, labels, valid, idx, prb = _batch_arrays(batch)
            lr = wsd_lr(it + 1, tc)
            try:
                with Tape() as tape:
                    logits = forward_batch(params, toks, bnds)
                    loss, kl, ce = kd_loss_terms(logits, idx, prb, labels, valid, tc.lambda_kd)
                grads = ad.backward(tape, loss, trainable)
                optimizer_step(trainable, grads, state, tc, lr)
            except NonFiniteError as e:
                raise NonFiniteError(f"training aborted at iteration {it + 1}: {e}") from e

            done = it + 1
            last = done == end_iter
            if tc.val_interval and val_chunks is not None and (
                done % tc.val_interval == 0 or last
            ):
                val_loss = validation_loss(params, val_chunks)
            else:
                val_loss = None
            if done % tc.log_interval == 0 or last:
                row = {
                    "iter": done,
                    "lr": lr,
                    "train_loss": float(loss.data),
                    "kl_term": kl,
                    "ce_term": ce,
                    "val_loss": val_loss,
                    "tokens_seen": done * tc.global_batch * chunk_len,
                }
                rows.append(row)
                if metrics_file is not None:
                    cells = [str(row["iter"])] + [
                        _format_metric(row[c]) for c in METRICS_COLUMNS[1:-1]
                    ] + [str(row["tokens_seen"])]
                    metrics_file.write(",".join(cells) + "\n")
                    metrics_file.flush()
            if done % tc.checkpoint_interval == 0 or last:
                ck = Checkpoint(done, params.copy(), state.copy())
                if out is not None:
                    ck.model_path = out / f"ckpt-{done:06d}.kdfc"
                    ck.state_path = out / f"state-{done:06d}.kdts"
                    save_model(ck.params, ck.model_path)
                    save_train_state(ck.state_path, done, state.step, state.moments)
                checkpoints.append(ck)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return TrainResult(params, checkpoints, rows, metrics_path)


# ---------------------------------------------------------------- averaging


def weight_average(checkpoints: Sequence[Checkpoint | ModelParams]) -> ModelParams:
    """Elementwise arithmetic mean of parameter tensors across checkpoints."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint to average")
    plist = [c.params if isinstance(c, Checkpoint) else c for c in checkpoints]
    first = plist[0]
    for p in plist[1:]:
        if p.config != first.config:
            raise ValueError("checkpoints have mismatched configs")
    avg = first.copy()
    names = [n for n, _ in first.named_tensors(include_tied_head=False)]
    for name in names:
        stack = np.stack([p.tensor(name).data.astype(np.float64) for p in plist])
        avg.tensor(name).data[...] = stack.mean(axis=0).astype(
            first.tensor(name).data.dtype
        )
    return avg


# ---------------------------------------------------------------- validation


def validation_loss(params: ModelParams, val_chunks: Sequence[TokenChunk]) -> float:
    """Mean next-token cross-entropy (nats) over non-pad positions.

    Chunks are evaluated one at a time and reduced with an exactly rounded
    sum, so the result does not depend on chunk order.
    """
    if not val_chunks:
        raise ValueError("empty validation set")
    sums: list[float] = []
    count = 0
    for chunk in val_chunks:
        valid = chunk.valid_target_mask()
        n = int(valid.sum())
        if n == 0:
            continue
        logits = forward_batch(params, chunk.tokens[None, :], [chunk.doc_boundaries])
        lsm = ad.log_softmax(logits).data[0]
        labels = np.zeros_like(chunk.tokens)
        labels[:-1] = chunk.tokens[1:]
        picked = np.take_along_axis(lsm, labels[:, None].astype(np.int64), axis=-1)[:, 0]
        sums.append(float(-(picked * valid).astype(np.float64).sum()))
        count += n
    if count == 0:
        raise ValueError("validation set has no valid target positions")
    return math.fsum(sums) / count
