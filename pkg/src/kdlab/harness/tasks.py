"""Deterministic synthetic evaluation tasks over the byte vocabulary.

Three task families score next-byte prediction at selected positions, each as
a 10-way multiple choice restricted to a candidate set (answer plus sampled
distractors, shuffled so constant logits score at chance):

  copy      "words|words"           scored on the repeated segment
  reversal  "text|txet"             scored on the byte-reversed segment
  mod-add   "3+4=7;...;2+8=0"       scored on the final sum digit (mod 10)

`task_corpus` emits solved instances as training documents so a desk model
can actually learn the formats; evaluation uses freshly seeded instances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..autodiff import Tape
from ..corpus import PAD_ID, tokenize_bytes
from ..model import ModelParams, forward_batch

TASK_NAMES = ("copy", "reversal", "mod-add")
N_CANDIDATES = 10

_LETTERS = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz", dtype=np.uint8)
_TEXT_ALPHABET = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz ", dtype=np.uint8)
_DIGITS = np.frombuffer(b"0123456789", dtype=np.uint8)

__all__ = [
    "TASK_NAMES",
    "N_CANDIDATES",
    "TaskInstance",
    "make_task",
    "task_suite",
    "task_corpus",
    "eval_tasks",
]


@dataclass(frozen=True)
class TaskInstance:
    """One prompt with multiple-choice next-byte questions inside it.

    Position t asks for tokens[t + 1]; the model's logits at t are restricted
    to `candidates[i]` and the argmax must equal `targets[i]`.
    """

    tokens: np.ndarray            # (T,) int32
    score_positions: np.ndarray   # (S,) int64, each < T - 1
    targets: np.ndarray           # (S,) int32 correct next byte
    candidates: np.ndarray        # (S, K) int32, contains the target


# ---------------------------------------------------------------- generators


def _lexicon(rng: np.random.Generator, n_words: int = 12) -> list[bytes]:
    return [bytes(rng.choice(_LETTERS, size=int(rng.integers(3, 6)))) for _ in range(n_words)]


def _copy_text(rng: np.random.Generator) -> tuple[bytes, int, int]:
    """(text, repeat_start, repeat_len): 'words|words\\n'."""
    words = _lexicon(rng)
    seg = b" ".join(words[int(rng.integers(len(words)))] for _ in range(int(rng.integers(3, 6))))
    return seg + b"|" + seg + b"\n", len(seg) + 1, len(seg)


def _reversal_text(rng: np.random.Generator) -> tuple[bytes, int, int]:
    words = _lexicon(rng)
    seg = b" ".join(words[int(rng.integers(len(words)))] for _ in range(int(rng.integers(2, 5))))
    return seg + b"|" + seg[::-1] + b"\n", len(seg) + 1, len(seg)


def _segment_questions(text: bytes, start: int, length: int):
    """Score every byte of text[start : start + length]."""
    toks = tokenize_bytes(text)
    pos = np.arange(start - 1, start + length - 1, dtype=np.int64)
    return toks, pos, toks[pos + 1].astype(np.int32)


def _mod_add_text(rng: np.random.Generator, shots: int = 4) -> tuple[bytes, int, int]:
    parts = []
    for _ in range(shots + 1):
        a, b = int(rng.integers(10)), int(rng.integers(10))
        parts.append(b"%d+%d=%d;" % (a, b, (a + b) % 10))
    text = b"".join(parts)[:-1] + b"\n"       # last ';' -> newline
    answer_at = len(text) - 2                 # the final sum digit
    return text, answer_at, 1


def _candidate_rows(
    targets: np.ndarray, alphabet: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    rows = np.empty((len(targets), N_CANDIDATES), dtype=np.int32)
    ids = alphabet.astype(np.int32)
    for i, t in enumerate(targets):
        pool = ids[ids != t]
        row = np.concatenate([[t], rng.choice(pool, size=N_CANDIDATES - 1, replace=False)])
        rows[i] = row[rng.permutation(N_CANDIDATES)]
    return rows


def make_task(name: str, rng: np.random.Generator) -> TaskInstance:
    """One deterministic instance of a named task from `rng`'s state."""
    if name == "copy":
        text, start, length = _copy_text(rng)
        toks, pos, targets = _segment_questions(text, start, length)
        cands = _candidate_rows(targets, _TEXT_ALPHABET, rng)
    elif name == "reversal":
        text, start, length = _reversal_text(rng)
        toks, pos, targets = _segment_questions(text, start, length)
        cands = _candidate_rows(targets, _TEXT_ALPHABET, rng)
    elif name == "mod-add":
        text, answer_at, _ = _mod_add_text(rng)
        toks = tokenize_bytes(text)
        pos = np.array([answer_at - 1], dtype=np.int64)
        targets = toks[pos + 1].astype(np.int32)
        cands = _DIGITS.astype(np.int32)[rng.permutation(10)][None, :]
    else:
        raise ValueError(f"unknown task {name!r} (expected one of {TASK_NAMES})")
    return TaskInstance(toks, pos, targets, cands)


def task_suite(
    names: Sequence[str] = TASK_NAMES, n_examples: int = 64, seed: int = 0
) -> list[tuple[str, list[TaskInstance]]]:
    """(name, instances) per task, reproducible from `seed`."""
    suite = []
    for ti, name in enumerate(names):
        rng = np.random.default_rng([seed, ti])
        suite.append((name, [make_task(name, rng) for _ in range(n_examples)]))
    return suite


def task_corpus(n_tokens: int, seed: int) -> list[bytes]:
    """Solved task instances as training documents (~n_tokens bytes total)."""
    rng = np.random.default_rng([seed, 1 << 20])
    builders: list[Callable] = [_copy_text, _reversal_text, _mod_add_text]
    docs: list[bytes] = []
    produced = 0
    while produced < n_tokens:
        parts = []
        for _ in range(int(rng.integers(4, 9))):
            text = builders[int(rng.integers(len(builders)))](rng)[0]
            parts.append(text)
        doc = b"".join(parts)
        docs.append(doc)
        produced += len(doc)
    return docs


# ---------------------------------------------------------------- evaluation


def _model_logits_fn(params: ModelParams, max_len: int):
    if max_len > params.config.seq_len:
        raise ValueError(
            f"task sequence length {max_len} exceeds model capacity {params.config.seq_len}"
        )

    def fn(tokens: np.ndarray, boundaries) -> np.ndarray:
        with Tape():
            return forward_batch(params, tokens, boundaries).data

    return fn


def eval_tasks(
    model,
    suite: Sequence[tuple[str, Sequence[TaskInstance]]],
    *,
    batch_size: int = 16,
) -> list[float]:
    """Accuracy in [0, 1] per task, pooled over every scored position.

    `model` is ModelParams or a callable (tokens [B, T], boundaries) ->
    logits [B, T, V]. Instances are right-padded to a common length; the pad
    run is fenced off with a document boundary like any packed chunk.
    """
    if not suite:
        raise ValueError("empty task suite")
    max_len = max(len(inst.tokens) for _, insts in suite for inst in insts)
    if isinstance(model, ModelParams):
        logits_fn = _model_logits_fn(model, max_len)
    else:
        logits_fn = model

    accs: list[float] = []
    for _, instances in suite:
        correct = 0
        total = 0
        for lo in range(0, len(instances), batch_size):
            batch = list(instances[lo : lo + batch_size])
            t_max = max(len(inst.tokens) for inst in batch)
            toks = np.full((len(batch), t_max), PAD_ID, dtype=np.int32)
            bnds = []
            for i, inst in enumerate(batch):
                toks[i, : len(inst.tokens)] = inst.tokens
                bnds.append(
                    np.array([len(inst.tokens)], dtype=np.int64)
                    if len(inst.tokens) < t_max
                    else np.array([], dtype=np.int64)
                )
            logits = logits_fn(toks, bnds)
            for i, inst in enumerate(batch):
                rows = logits[i, inst.score_positions, :]
                on_cands = np.take_along_axis(rows, inst.candidates, axis=1)
                picked = inst.candidates[
                    np.arange(len(inst.targets)), np.argmax(on_cands, axis=1)
                ]
                correct += int((picked == inst.targets).sum())
                total += len(inst.targets)
        accs.append(correct / total)
    return accs
