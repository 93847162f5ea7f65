"""Shared fixtures: a small but fully trained distillation lab.

The desk lab is expensive (a few minutes of CPU) and session scoped; it
is only built when a test actually asks for it. Everything downstream
is deterministic, so two sessions with the same code produce the same
losses bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

from kdlab.autodiff import Tape
from kdlab.checkpoint import save_model
from kdlab.corpus import TokenChunk, pack_corpus, synthetic_corpus, tokenize_bytes
from kdlab.distill import TrainConfig, train, validation_loss
from kdlab.harness.tasks import task_corpus
from kdlab.logitstore import generate_logit_shards
from kdlab.model import DESK_PRESETS, build_model, forward_batch

# ---- desk lab recipe (frozen; changing any value changes every result) ----

CHUNK_LEN = 64
CORPUS_TOKENS = 500_000
TASK_TOKENS = 80_000
N_VAL_CHUNKS = 500
N_STORE_CHUNKS = 5000
N_CALIB_CHUNKS = 32
STORE_K = 32
TEACHER_ITERS = 800
STUDENT_ITERS = 800
STUDENT_SEEDS = (0, 1, 2)
CKPT_INTERVAL = 200


@dataclass
class DeskLab:
    """Paths and measurements from one fully built desk-scale run."""

    root: Path
    train_chunks: list[TokenChunk]
    val_chunks: list[TokenChunk]
    calib_chunks: list[TokenChunk]
    store_dir: Path
    teacher_path: Path
    teacher_val: float
    student_val: dict[tuple[str, int], float] = field(default_factory=dict)
    run_dirs: dict[tuple[str, int], Path] = field(default_factory=dict)

    @property
    def seeds(self) -> tuple[int, ...]:
        return STUDENT_SEEDS


def build_desk_corpus() -> list[TokenChunk]:
    """Word-structured gibberish mixed with solved task documents."""
    docs = [tokenize_bytes(d) for d in synthetic_corpus(CORPUS_TOKENS, seed=11)]
    docs += [tokenize_bytes(d) for d in task_corpus(TASK_TOKENS, seed=12)]
    order = np.random.default_rng(13).permutation(len(docs))
    return pack_corpus([docs[i] for i in order], chunk_len=CHUNK_LEN)


@pytest.fixture(scope="session")
def desk_lab(tmp_path_factory) -> DeskLab:
    root = tmp_path_factory.mktemp("desk-lab")
    chunks = build_desk_corpus()
    train_chunks, val_chunks = chunks[:-N_VAL_CHUNKS], chunks[-N_VAL_CHUNKS:]

    # The teacher trains with lambda=0 (pure cross-entropy), so the store it
    # reads only supplies data order; zero logits keep its build cheap.
    dummy_dir = root / "dummy-store"

    def zeros_fn(tokens, boundaries):
        return np.zeros((tokens.shape[0], tokens.shape[1], 257), dtype=np.float32)

    generate_logit_shards(
        train_chunks[:N_STORE_CHUNKS], zeros_fn, dummy_dir, vocab=257, k=16,
        tokens_per_shard=1 << 18, perm_seed=0, batch_size=64,
    )
    teacher_cfg = TrainConfig(
        lr_peak=1.5e-3, global_batch=8, total_iters=TEACHER_ITERS,
        lambda_kd=0.0, seed=100, checkpoint_interval=10**6,
    )
    teacher = train(DESK_PRESETS["desk-teacher"], dummy_dir, teacher_cfg).params
    teacher_path = root / "teacher.kdfc"
    save_model(teacher, teacher_path)

    store_dir = root / "store"

    def teacher_fn(tokens, boundaries):
        with Tape():
            return forward_batch(teacher, tokens, boundaries).data

    generate_logit_shards(
        train_chunks[:N_STORE_CHUNKS], teacher_fn, store_dir, vocab=257, k=STORE_K,
        tokens_per_shard=1 << 18, perm_seed=0, batch_size=32,
    )

    lab = DeskLab(
        root=root,
        train_chunks=train_chunks,
        val_chunks=val_chunks,
        calib_chunks=train_chunks[:N_CALIB_CHUNKS],
        store_dir=store_dir,
        teacher_path=teacher_path,
        teacher_val=validation_loss(teacher, val_chunks),
    )
    for seed in STUDENT_SEEDS:
        for lam, tag in ((0.9, "kd"), (0.0, "ce")):
            cfg = TrainConfig(
                lr_peak=3e-3, global_batch=8, total_iters=STUDENT_ITERS,
                lambda_kd=lam, seed=seed, checkpoint_interval=CKPT_INTERVAL,
            )
            run_dir = root / f"run-{tag}-s{seed}"
            result = train(DESK_PRESETS["desk-student-s"], store_dir, cfg, out_dir=run_dir)
            lab.run_dirs[(tag, seed)] = run_dir
            lab.student_val[(tag, seed)] = validation_loss(result.params, val_chunks)
    return lab
