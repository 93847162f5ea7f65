"""Miniature pre-norm transformer with grouped-query attention.

Blocks are rmsnorm -> fused-QKV attention (rotary, causal + per-document
masking) -> residual, then rmsnorm -> up/activation/down MLP (non-gated) ->
residual. Embedding and LM head may share storage (tied). Everything runs on
the tape autodiff so the same forward serves training, eval and gradchecks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_NEG = -1e9  # additive "minus infinity" that stays finite in float32

__all__ = [
    "ModelConfig",
    "Block",
    "ModelParams",
    "ParamCount",
    "build_model",
    "params_from_arrays",
    "count_params",
    "forward",
    "forward_batch",
    "causal_doc_mask",
    "activation_apply",
    "FAMILY_PRESETS",
    "DESK_PRESETS",
    "MASK_NEG",
]


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    dim: int
    mlp_dim: int
    q_heads: int
    kv_heads: int
    vocab: int
    seq_len: int
    tied_embeddings: bool = True
    activation: str = "silu"
    rope_base: float = 10000.0

    def __post_init__(self):
        if min(self.dim, self.mlp_dim, self.q_heads, self.kv_heads, self.vocab, self.seq_len) <= 0:
            raise ValueError("all model dimensions must be positive")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.dim % self.q_heads:
            raise ValueError(f"dim {self.dim} not divisible by q_heads {self.q_heads}")
        if self.q_heads % self.kv_heads:
            raise ValueError(f"q_heads {self.q_heads} not divisible by kv_heads {self.kv_heads}")
        if (self.dim // self.q_heads) % 2:
            raise ValueError("head dim must be even for rotary")

    @property
    def head_dim(self) -> int:
        return self.dim // self.q_heads

    @property
    def kv_dim(self) -> int:
        return self.kv_heads * self.head_dim

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


class ParamCount(NamedTuple):
    total: int
    non_embedding: int


def count_params(config: ModelConfig) -> ParamCount:
    """Closed-form parameter count; embeddings/head excluded from non_embedding."""
    d, kv, mlp = config.dim, config.kv_dim, config.mlp_dim
    per_layer = d + (d + 2 * kv) * d + d * d + d + mlp * d + d * mlp
    non_emb = config.layers * per_layer + d  # final norm gain
    emb = config.vocab * d * (1 if config.tied_embeddings else 2)
    return ParamCount(non_emb + emb, non_emb)


# ---------------------------------------------------------------- parameters


@dataclass
class Block:
    attn_gain: Tensor
    wqkv: Tensor   # (dim + 2*kv_dim, dim), rows stacked [Q; K; V]
    wo: Tensor     # (dim, dim)
    mlp_gain: Tensor
    wup: Tensor    # (mlp_dim, dim)
    wdown: Tensor  # (dim, mlp_dim)


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: Tensor          # (vocab, dim)
    blocks: list[Block] = field(default_factory=list)
    final_gain: Tensor = None  # (dim,)
    head: Tensor = None        # (vocab, dim); same object as embedding when tied

    def named_tensors(self, include_tied_head: bool = False):
        """(name, tensor) pairs in declaration order; tied head skipped unless asked."""
        yield "embedding", self.embedding
        for i, blk in enumerate(self.blocks):
            yield f"layer{i}.attn_gain", blk.attn_gain
            yield f"layer{i}.wqkv", blk.wqkv
            yield f"layer{i}.wo", blk.wo
            yield f"layer{i}.mlp_gain", blk.mlp_gain
            yield f"layer{i}.wup", blk.wup
            yield f"layer{i}.wdown", blk.wdown
        yield "final_gain", self.final_gain
        if include_tied_head or self.head is not self.embedding:
            yield "head", self.head

    def trainable(self) -> list[Tensor]:
        """Unique parameter tensors (tied head appears once)."""
        return [t for _, t in self.named_tensors()]

    def projection_names(self) -> list[str]:
        """The per-block matrices that quantization applies to."""
        names = []
        for i in range(len(self.blocks)):
            names += [f"layer{i}.wqkv", f"layer{i}.wo", f"layer{i}.wup", f"layer{i}.wdown"]
        return names

    def tensor(self, name: str) -> Tensor:
        for n, t in self.named_tensors(include_tied_head=True):
            if n == name:
                return t
        raise KeyError(name)

    def copy(self, dtype=None) -> "ModelParams":
        def dup(t: Tensor) -> Tensor:
            arr = t.data.astype(dtype) if dtype is not None else t.data.copy()
            return Tensor(arr, requires_grad=True, name=t.name)

        emb = dup(self.embedding)
        blocks = [
            Block(dup(b.attn_gain), dup(b.wqkv), dup(b.wo), dup(b.mlp_gain), dup(b.wup), dup(b.wdown))
            for b in self.blocks
        ]
        head = emb if self.head is self.embedding else dup(self.head)
        return ModelParams(self.config, emb, blocks, dup(self.final_gain), head)


def params_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
    """Assemble ModelParams from a name -> array map (tied head omitted)."""
    tensors = {
        name: Tensor(np.ascontiguousarray(arr), requires_grad=True, name=name)
        for name, arr in arrays.items()
    }
    emb = tensors["embedding"]
    blocks = [
        Block(
            tensors[f"layer{i}.attn_gain"],
            tensors[f"layer{i}.wqkv"],
            tensors[f"layer{i}.wo"],
            tensors[f"layer{i}.mlp_gain"],
            tensors[f"layer{i}.wup"],
            tensors[f"layer{i}.wdown"],
        )
        for i in range(config.layers)
    ]
    head = emb if config.tied_embeddings else tensors["head"]
    return ModelParams(config, emb, blocks, tensors["final_gain"], head)


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Seeded init: normals with std 1/sqrt(dim), output/down projections
    additionally scaled by 1/sqrt(2*layers); gains start at one. The draw
    order below is part of the determinism contract.
    """
    rng = np.random.default_rng(seed)
    d = config.dim
    std = 1.0 / math.sqrt(d)
    depth = max(config.layers, 1)
    out_std = std / math.sqrt(2 * depth)

    def normal(shape, s, name):
        return Tensor(rng.normal(0.0, s, size=shape).astype(dtype), True, name)

    def ones(shape, name):
        return Tensor(np.ones(shape, dtype=dtype), True, name)

    emb = normal((config.vocab, d), std, "embedding")
    blocks = []
    for i in range(config.layers):
        blocks.append(
            Block(
                attn_gain=ones((d,), f"layer{i}.attn_gain"),
                wqkv=normal((d + 2 * config.kv_dim, d), std, f"layer{i}.wqkv"),
                wo=normal((d, d), out_std, f"layer{i}.wo"),
                mlp_gain=ones((d,), f"layer{i}.mlp_gain"),
                wup=normal((config.mlp_dim, d), std, f"layer{i}.wup"),
                wdown=normal((d, config.mlp_dim), out_std, f"layer{i}.wdown"),
            )
        )
    final_gain = ones((d,), "final_gain")
    head = emb if config.tied_embeddings else normal((config.vocab, d), std, "head")
    return ModelParams(config, emb, blocks, final_gain, head)


# ---------------------------------------------------------------- masking


def _check_boundaries(boundaries: Sequence[int], t_len: int) -> np.ndarray:
    b = np.asarray(boundaries, dtype=np.int64)
    if b.size:
        if (np.diff(b) <= 0).any():
            raise ValueError("doc boundaries must be strictly increasing")
        if b[0] <= 0 or b[-1] >= t_len:
            raise ValueError(f"doc boundaries must lie in (0, {t_len})")
    return b


def causal_doc_mask(t_len: int, boundaries: Sequence[int] = (), dtype=np.float32) -> np.ndarray:
    """(T, T) additive mask: position t sees s iff s <= t and same document."""
    b = _check_boundaries(boundaries, t_len)
    pos = np.arange(t_len)
    doc = np.searchsorted(b, pos, side="right")
    allowed = (pos[None, :] <= pos[:, None]) & (doc[None, :] == doc[:, None])
    return np.where(allowed, 0.0, MASK_NEG).astype(dtype)


# ---------------------------------------------------------------- forward


def forward_batch(
    params: ModelParams,
    tokens: np.ndarray,
    boundaries: Sequence[Sequence[int]] | None = None,
    weight_transform: Callable[[str, Tensor], Tensor] | None = None,
    act_transform: Callable[[str, Tensor], Tensor] | None = None,
    capture: dict[str, list[np.ndarray]] | None = None,
) -> Tensor:
    """Logits (B, T, vocab) for a batch of token chunks.

    weight_transform wraps each per-block projection weight (quantized/STE
    paths); act_transform wraps each projection's input (activation
    quantization); capture collects projection inputs for calibration.
    """
    cfg = params.config
    ids = np.asarray(tokens)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.dtype.kind not in "iu":
        raise TypeError("tokens must be integers")
    bsz, t_len = ids.shape
    if t_len > cfg.seq_len:
        raise ValueError(f"sequence length {t_len} exceeds config seq_len {cfg.seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
        raise ValueError("token id out of range")

    dtype = params.embedding.data.dtype
    if boundaries is None:
        boundaries = [()] * bsz
    if len(boundaries) != bsz:
        raise ValueError("need one boundary list per sequence")
    mask = np.stack([causal_doc_mask(t_len, bd, dtype) for bd in boundaries])

    def weight(name: str, t: Tensor) -> Tensor:
        return weight_transform(name, t) if weight_transform is not None else t

    def proj_input(name: str, t: Tensor) -> Tensor:
        if capture is not None:
            capture.setdefault(name, []).append(
                t.data.reshape(-1, t.data.shape[-1]).copy()
            )
        return act_transform(name, t) if act_transform is not None else t

    d, kv_d, hd = cfg.dim, cfg.kv_dim, cfg.head_dim
    x = ad.embed(params.embedding, ids)
    for i, blk in enumerate(params.blocks):
        h = ad.rmsnorm(x, blk.attn_gain)
        h = proj_input(f"layer{i}.wqkv", h)
        qkv = ad.linear(h, weight(f"layer{i}.wqkv", blk.wqkv))
        q = ad.reshape(ad.slice_last(qkv, 0, d), (bsz, t_len, cfg.q_heads, hd))
        k = ad.reshape(ad.slice_last(qkv, d, d + kv_d), (bsz, t_len, cfg.kv_heads, hd))
        v = ad.reshape(ad.slice_last(qkv, d + kv_d, d + 2 * kv_d), (bsz, t_len, cfg.kv_heads, hd))
        q = ad.rope(q, cfg.rope_base)
        k = ad.rope(k, cfg.rope_base)
        att = ad.reshape(ad.attention(q, k, v, mask), (bsz, t_len, d))
        att = proj_input(f"layer{i}.wo", att)
        x = ad.add(x, ad.linear(att, weight(f"layer{i}.wo", blk.wo)))

        h = ad.rmsnorm(x, blk.mlp_gain)
        h = proj_input(f"layer{i}.wup", h)
        up = ad.linear(h, weight(f"layer{i}.wup", blk.wup))
        act = ad.activation(up, cfg.activation)
        act = proj_input(f"layer{i}.wdown", act)
        x = ad.add(x, ad.linear(act, weight(f"layer{i}.wdown", blk.wdown)))

    h = ad.rmsnorm(x, params.final_gain)
    h = proj_input("head", h)
    return ad.linear(h, params.head)


def forward(
    params: ModelParams,
    tokens: np.ndarray,
    doc_boundaries: Sequence[int] = (),
    **kwargs,
) -> Tensor:
    """Logits (T, vocab) for one token chunk."""
    out = forward_batch(params, np.asarray(tokens)[None, :], [tuple(doc_boundaries)], **kwargs)
    return ad.reshape(out, out.shape[1:])


def activation_apply(x, kind: str):
    """Elementwise activation on a Tensor or raw array, by registry name."""
    if isinstance(x, Tensor):
        return ad.activation(x, kind)
    return ad.activation(Tensor(np.asarray(x)), kind).data


# ---------------------------------------------------------------- presets

# Full-scale family configurations the desk models are scaled down from
# (vocab 131072, sequence 4096); used by the parameter-count checks.
FAMILY_PRESETS: dict[str, ModelConfig] = {
    "family-0.5b": ModelConfig(20, 1024, 6144, 16, 4, 131072, 4096, tied_embeddings=True),
    "family-1.5b": ModelConfig(16, 2048, 12288, 32, 8, 131072, 4096, tied_embeddings=False),
    "family-4b": ModelConfig(24, 3072, 16384, 24, 8, 131072, 4096, tied_embeddings=False),
    "family-8b": ModelConfig(32, 4096, 21504, 32, 8, 131072, 4096, tied_embeddings=False),
}

# Desk-scale byte-vocab defaults: one teacher, three student sizes.
DESK_PRESETS: dict[str, ModelConfig] = {
    "desk-teacher": ModelConfig(4, 128, 512, 4, 2, 257, 256),
    "desk-student-s": ModelConfig(1, 32, 128, 2, 1, 257, 256),
    "desk-student-m": ModelConfig(2, 64, 256, 4, 2, 257, 256),
    "desk-student-l": ModelConfig(3, 96, 384, 4, 2, 257, 256),
}
