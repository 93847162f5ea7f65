"""Byte-level corpus handling: tokenize, pack into fixed chunks, synthesize.

The tokenizer is the identity on bytes (ids 0..255) plus one reserved pad id,
so vocab is 257. pack_corpus concatenates documents into fixed-length chunks,
recording where new documents start inside each chunk; those offsets drive the
block-diagonal attention mask. The final partial chunk is padded and the pad
run is treated as its own document.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BYTE_VOCAB = 257
PAD_ID = 256
CHUNKS_MAGIC = b"KDCH"
_CHUNKS_VERSION = 1

__all__ = [
    "BYTE_VOCAB",
    "PAD_ID",
    "TokenChunk",
    "tokenize_bytes",
    "pack_corpus",
    "synthetic_corpus",
    "load_corpus_dir",
    "save_chunks",
    "load_chunks",
]


def tokenize_bytes(doc: bytes) -> np.ndarray:
    """One byte -> one token id."""
    return np.frombuffer(doc, dtype=np.uint8).astype(np.int32)


@dataclass(frozen=True)
class TokenChunk:
    """Fixed-length token run plus intra-chunk document starts (offsets > 0)."""

    tokens: np.ndarray              # (chunk_len,) int32
    doc_boundaries: tuple[int, ...] = ()

    def __post_init__(self):
        t = self.tokens
        if t.ndim != 1:
            raise ValueError("chunk tokens must be 1-D")
        for b in self.doc_boundaries:
            if not 0 < b < len(t):
                raise ValueError(f"boundary {b} outside (0, {len(t)})")
        if any(b2 <= b1 for b1, b2 in zip(self.doc_boundaries, self.doc_boundaries[1:])):
            raise ValueError("boundaries must be strictly increasing")

    def valid_target_mask(self) -> np.ndarray:
        """True at positions that predict a real (non-pad) next token."""
        t = self.tokens
        ok = np.zeros(len(t), dtype=bool)
        ok[:-1] = (t[:-1] != PAD_ID) & (t[1:] != PAD_ID)
        return ok


def pack_corpus(documents: Sequence[np.ndarray], chunk_len: int) -> list[TokenChunk]:
    """Concatenate documents and cut into chunk_len pieces.

    A document may span chunks; its continuation starts a chunk without a
    boundary. The last chunk is padded with PAD_ID and the pad run gets a
    boundary so it cannot attend into real text.
    """
    if chunk_len <= 0:
        raise ValueError("chunk_len must be positive")
    docs = [np.asarray(d, dtype=np.int32) for d in documents if len(d)]
    if not docs:
        raise ValueError("corpus contains no non-empty documents")
    for d in docs:
        if d.min() < 0 or d.max() >= PAD_ID:
            raise ValueError("document token outside byte range")

    flat = np.concatenate(docs)
    starts = np.cumsum([0] + [len(d) for d in docs[:-1]])
    total = len(flat)
    n_chunks = -(-total // chunk_len)
    padded = np.full(n_chunks * chunk_len, PAD_ID, dtype=np.int32)
    padded[:total] = flat

    chunks = []
    for c in range(n_chunks):
        lo, hi = c * chunk_len, (c + 1) * chunk_len
        inner = [int(s - lo) for s in starts if lo < s < hi]
        if lo < total < hi:
            inner.append(int(total - lo))  # pad run is its own document
        chunks.append(TokenChunk(padded[lo:hi], tuple(sorted(set(inner)))))
    return chunks


# ---------------------------------------------------------------- synthesis


def synthetic_corpus(n_tokens: int, seed: int, n_docs: int | None = None) -> list[bytes]:
    """Deterministic word-bigram gibberish with learnable structure.

    Words come from a small seeded lexicon; successors follow a sparse
    per-word distribution, so within-word byte transitions are nearly
    deterministic while word boundaries carry real entropy.
    """
    rng = np.random.default_rng(seed)
    n_words = 24
    letters = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz", dtype=np.uint8)
    lexicon = [
        bytes(rng.choice(letters, size=rng.integers(2, 6)))
        for _ in range(n_words)
    ]
    # sparse successor distribution per word: 4 likely follow-ups
    succ = np.zeros((n_words, n_words))
    for i in range(n_words):
        picks = rng.choice(n_words, size=4, replace=False)
        succ[i, picks] = rng.dirichlet(np.ones(4) * 2.0)

    docs: list[bytes] = []
    produced = 0
    while produced < n_tokens:
        length = int(rng.integers(40, 120))  # words per document
        w = int(rng.integers(n_words))
        parts = [lexicon[w]]
        for _ in range(length - 1):
            w = int(rng.choice(n_words, p=succ[w]))
            parts.append(lexicon[w])
        doc = b" ".join(parts) + b"\n"
        docs.append(doc)
        produced += len(doc)
        if n_docs is not None and len(docs) >= n_docs:
            break
    return docs


def load_corpus_dir(path) -> list[np.ndarray]:
    """Each regular file under `path` (sorted by name) is one document."""
    files = sorted(p for p in Path(path).iterdir() if p.is_file())
    if not files:
        raise ValueError(f"no documents in {path}")
    return [tokenize_bytes(p.read_bytes()) for p in files]


# ---------------------------------------------------------------- chunk files


def save_chunks(chunks: Iterable[TokenChunk], path) -> None:
    chunks = list(chunks)
    chunk_len = len(chunks[0].tokens) if chunks else 0
    with open(path, "wb") as f:
        f.write(CHUNKS_MAGIC)
        f.write(struct.pack("<III", _CHUNKS_VERSION, chunk_len, len(chunks)))
        for ch in chunks:
            if len(ch.tokens) != chunk_len:
                raise ValueError("all chunks in a file must share chunk_len")
            f.write(np.ascontiguousarray(ch.tokens, dtype="<u4").tobytes())
            f.write(struct.pack("<I", len(ch.doc_boundaries)))
            f.write(np.asarray(ch.doc_boundaries, dtype="<u4").tobytes())


def load_chunks(path) -> list[TokenChunk]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHUNKS_MAGIC:
        raise ValueError(f"{path}: not a chunk file (bad magic)")
    version, chunk_len, count = struct.unpack_from("<III", raw, 4)
    if version != _CHUNKS_VERSION:
        raise ValueError(f"{path}: unsupported chunk-file version {version}")
    offset = 16
    out = []
    for _ in range(count):
        toks = np.frombuffer(raw, dtype="<u4", count=chunk_len, offset=offset).astype(np.int32)
        offset += 4 * chunk_len
        (nb,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        bnd = tuple(int(x) for x in np.frombuffer(raw, dtype="<u4", count=nb, offset=offset))
        offset += 4 * nb
        out.append(TokenChunk(toks, bnd))
    return out
