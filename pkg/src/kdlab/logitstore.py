"""Compressed store for sparse teacher predictions.

Each token position keeps its top-K output probabilities (raw, so they sum to
less than one) as K index/probability pairs. Chunks are shuffled once at
generation time so a sequential read during training already sees a shuffled
stream. Shards are gzip frames with a fixed binary layout; the manifest pins
vocab, K, chunk length, the shuffle seed, and a CRC32 per shard.
"""

from __future__ import annotations

import gzip
import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

from .corpus import TokenChunk

SHARD_MAGIC = b"SLOG"
_SHARD_VERSION = 1
MANIFEST_NAME = "manifest.json"

__all__ = [
    "SparseLogitRecord",
    "LogitBlock",
    "topk_sparsify",
    "encode_shard",
    "decode_shard",
    "write_shard",
    "load_shard",
    "generate_logit_shards",
    "stream_shards",
    "load_manifest",
]


class SparseLogitRecord(NamedTuple):
    """Top-K teacher probabilities for one position, highest first."""

    indices: np.ndarray  # (K,) uint32
    probs: np.ndarray    # (K,) float32


@dataclass(frozen=True)
class LogitBlock:
    """One chunk of tokens with a sparse record per position."""

    chunk: TokenChunk
    indices: np.ndarray  # (T, K) uint32
    probs: np.ndarray    # (T, K) float32

    def __len__(self) -> int:
        return len(self.chunk.tokens)

    def __getitem__(self, i: int) -> SparseLogitRecord:
        return SparseLogitRecord(self.indices[i], self.probs[i])


def topk_sparsify(probs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(..., V) probabilities -> top-k (indices, probs), ties to lower index.

    Rows come out sorted by descending probability so a store round-trip is
    byte-deterministic.
    """
    p = np.asarray(probs, dtype=np.float32)
    v = p.shape[-1]
    if not 0 < k <= v:
        raise ValueError(f"k={k} outside [1, {v}]")
    flat = p.reshape(-1, v)
    ids = np.broadcast_to(np.arange(v), flat.shape)
    # lexsort: primary key last. Sort by -p, then index ascending on ties.
    order = np.lexsort((ids, -flat), axis=-1)[:, :k]
    idx = order.astype(np.uint32)
    vals = np.take_along_axis(flat, order, axis=-1)
    shape = p.shape[:-1] + (k,)
    return idx.reshape(shape), vals.reshape(shape)


# ---------------------------------------------------------------- shard codec


def _record_dtype(k: int) -> np.dtype:
    return np.dtype([("idx", "<u4", (k,)), ("p", "<f4", (k,))])


def encode_shard(blocks: Sequence[LogitBlock], vocab: int) -> bytes:
    """Serialize blocks into one uncompressed shard frame."""
    if not blocks:
        raise ValueError("shard needs at least one block")
    chunk_len = len(blocks[0])
    k = blocks[0].indices.shape[-1]
    n_records = chunk_len * len(blocks)
    out = bytearray()
    out += struct.pack(
        "<4sIIIQII", SHARD_MAGIC, _SHARD_VERSION, vocab, k, n_records, chunk_len, len(blocks)
    )
    for b in blocks:
        if len(b) != chunk_len or b.indices.shape != (chunk_len, k):
            raise ValueError("all blocks in a shard must share chunk_len and k")
        out += np.ascontiguousarray(b.chunk.tokens, dtype="<u4").tobytes()
        bnd = b.chunk.doc_boundaries
        out += struct.pack("<I", len(bnd))
        out += np.asarray(bnd, dtype="<u4").tobytes()
    rec = np.empty(n_records, dtype=_record_dtype(k))
    rec["idx"] = np.concatenate([b.indices for b in blocks]).astype("<u4")
    rec["p"] = np.concatenate([b.probs for b in blocks]).astype("<f4")
    out += rec.tobytes()
    return bytes(out)


def decode_shard(frame: bytes) -> list[LogitBlock]:
    if frame[:4] != SHARD_MAGIC:
        raise ValueError("bad shard magic")
    _, version, vocab, k, n_records, chunk_len, n_chunks = struct.unpack_from(
        "<4sIIIQII", frame, 0
    )
    if version != _SHARD_VERSION:
        raise ValueError(f"unsupported shard version {version}")
    if n_records != chunk_len * n_chunks:
        raise ValueError("shard header is inconsistent")
    off = 32
    chunks = []
    for _ in range(n_chunks):
        toks = np.frombuffer(frame, dtype="<u4", count=chunk_len, offset=off).astype(np.int32)
        off += 4 * chunk_len
        (nb,) = struct.unpack_from("<I", frame, off)
        off += 4
        bnd = tuple(int(x) for x in np.frombuffer(frame, dtype="<u4", count=nb, offset=off))
        off += 4 * nb
        chunks.append(TokenChunk(toks, bnd))
    rec = np.frombuffer(frame, dtype=_record_dtype(k), count=n_records, offset=off)
    off += rec.nbytes
    if off != len(frame):
        raise ValueError("shard has trailing bytes")
    idx = rec["idx"].reshape(n_chunks, chunk_len, k).astype(np.uint32)
    prb = rec["p"].reshape(n_chunks, chunk_len, k).astype(np.float32)
    return [LogitBlock(c, idx[i], prb[i]) for i, c in enumerate(chunks)]


def write_shard(path, blocks: Sequence[LogitBlock], vocab: int) -> int:
    """Gzip the frame to disk (fixed mtime, no filename) and return its CRC32."""
    frame = encode_shard(blocks, vocab)
    crc = zlib.crc32(frame)
    with open(path, "wb") as f:
        with gzip.GzipFile(filename="", mode="wb", fileobj=f, mtime=0) as gz:
            gz.write(frame)
    return crc


def load_shard(path, expected_crc: int | None = None, *,
               read_size: int = 1 << 20, trace: list | None = None) -> list[LogitBlock]:
    """Decompress a shard in bounded reads and verify its checksum."""
    name = Path(path).name
    buf = bytearray()
    with open(path, "rb") as raw:
        src = raw if trace is None else _TracedReader(raw, name, trace)
        with gzip.GzipFile(fileobj=src, mode="rb") as gz:
            while True:
                piece = gz.read(read_size)
                if not piece:
                    break
                buf += piece
    crc = zlib.crc32(bytes(buf))
    if expected_crc is not None and crc != expected_crc:
        raise IOError(
            f"shard {name}: CRC32 mismatch (stored {expected_crc:#010x}, read {crc:#010x})"
        )
    return decode_shard(bytes(buf))


class _TracedReader:
    """File wrapper that logs (name, offset, nbytes) for every read."""

    def __init__(self, f, name: str, trace: list):
        self._f = f
        self._name = name
        self._trace = trace

    def read(self, n=-1):
        off = self._f.tell()
        data = self._f.read(n)
        self._trace.append((self._name, off, len(data)))
        return data

    def __getattr__(self, attr):
        return getattr(self._f, attr)


# ---------------------------------------------------------------- generation


def generate_logit_shards(
    chunks: Sequence[TokenChunk],
    logits_fn: Callable[[np.ndarray, Sequence[tuple[int, ...]]], np.ndarray],
    out_dir,
    *,
    vocab: int,
    k: int = 256,
    tokens_per_shard: int = 1 << 20,
    perm_seed: int | None = 0,
    batch_size: int = 8,
) -> dict:
    """Run the teacher over every chunk, sparsify, shard, and write a manifest.

    logits_fn maps (tokens [B, T] int32, per-row boundary tuples) to logits
    [B, T, V]. Chunk order is permuted with perm_seed before writing
    (perm_seed None keeps corpus order). Returns the manifest dict.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not chunks:
        raise ValueError("no chunks to process")
    chunk_len = len(chunks[0].tokens)
    if tokens_per_shard % chunk_len:
        raise ValueError(
            f"tokens_per_shard ({tokens_per_shard}) must be a multiple of chunk_len ({chunk_len})"
        )
    chunks_per_shard = tokens_per_shard // chunk_len

    if perm_seed is None:
        order = np.arange(len(chunks))
    else:
        order = np.random.default_rng(perm_seed).permutation(len(chunks))
    ordered = [chunks[i] for i in order]

    blocks: list[LogitBlock] = []
    for lo in range(0, len(ordered), batch_size):
        batch = ordered[lo:lo + batch_size]
        toks = np.stack([c.tokens for c in batch])
        logits = logits_fn(toks, [c.doc_boundaries for c in batch])
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z, dtype=np.float32)
        probs = e / e.sum(axis=-1, keepdims=True)
        idx, top = topk_sparsify(probs, k)
        blocks.extend(
            LogitBlock(c, idx[i], top[i]) for i, c in enumerate(batch)
        )

    shard_entries = []
    for s, lo in enumerate(range(0, len(blocks), chunks_per_shard)):
        part = blocks[lo:lo + chunks_per_shard]
        name = f"shard-{s:04d}.slog.gz"
        crc = write_shard(out_dir / name, part, vocab)
        shard_entries.append(
            {"path": name, "tokens": chunk_len * len(part), "crc32": crc}
        )

    manifest = {
        "vocab": vocab,
        "k": k,
        "chunk_len": chunk_len,
        "perm_seed": perm_seed,
        "codec": "gzip",
        "shards": shard_entries,
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return manifest


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    manifest = json.loads(path.read_text())
    for key in ("vocab", "k", "chunk_len", "codec", "shards"):
        if key not in manifest:
            raise ValueError(f"manifest missing {key!r}")
    if manifest["codec"] != "gzip":
        raise ValueError(f"unsupported codec {manifest['codec']!r}")
    return manifest


def stream_shards(
    manifest_path,
    *,
    prefetch: bool = True,
    read_size: int = 1 << 20,
    trace: list | None = None,
) -> Iterator[LogitBlock]:
    """Yield blocks shard by shard in manifest order.

    With prefetch on, the next shard is decompressed on a worker thread while
    the caller consumes the current one.
    """
    path = Path(manifest_path)
    base = path if path.is_dir() else path.parent
    manifest = load_manifest(path)
    shards = manifest["shards"]

    def fetch(entry):
        return load_shard(
            base / entry["path"], entry["crc32"], read_size=read_size, trace=trace
        )

    if not prefetch:
        for entry in shards:
            yield from fetch(entry)
        return

    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = pool.submit(fetch, shards[0]) if shards else None
        for nxt in range(1, len(shards) + 1):
            blocks = pending.result()
            pending = pool.submit(fetch, shards[nxt]) if nxt < len(shards) else None
            yield from blocks
