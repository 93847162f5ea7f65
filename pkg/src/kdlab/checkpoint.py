"""Binary checkpoint files.

Model checkpoint ("KDFC"): magic, u32 version, u32 config-JSON length, the
JSON, then every tensor as raw little-endian float32 in declaration order
(embedding; per layer: attn gain, QKV, output, mlp gain, up, down; final
gain; head only when untied). Training state ("KDTS") appends optimizer
moments and the schedule position so a resumed run is bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import Block, ModelConfig, ModelParams

MODEL_MAGIC = b"KDFC"
STATE_MAGIC = b"KDTS"
VERSION = 1

__all__ = [
    "save_model",
    "load_model",
    "save_train_state",
    "load_train_state",
    "MODEL_MAGIC",
    "STATE_MAGIC",
]


def _tensor_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, kv, mlp = config.dim, config.kv_dim, config.mlp_dim
    shapes = [("embedding", (config.vocab, d))]
    for i in range(config.layers):
        shapes += [
            (f"layer{i}.attn_gain", (d,)),
            (f"layer{i}.wqkv", (d + 2 * kv, d)),
            (f"layer{i}.wo", (d, d)),
            (f"layer{i}.mlp_gain", (d,)),
            (f"layer{i}.wup", (mlp, d)),
            (f"layer{i}.wdown", (d, mlp)),
        ]
    shapes.append(("final_gain", (d,)))
    if not config.tied_embeddings:
        shapes.append(("head", (config.vocab, d)))
    return shapes


def save_model(params: ModelParams, path) -> None:
    cfg_json = params.config.to_json().encode()
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<II", VERSION, len(cfg_json)))
        f.write(cfg_json)
        for _, t in params.named_tensors():
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_model(path, dtype=np.float32) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    version, cfg_len = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    config = ModelConfig.from_json(raw[12 : 12 + cfg_len].decode())

    offset = 12 + cfg_len
    tensors: dict[str, Tensor] = {}
    for name, shape in _tensor_shapes(config):
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after tensor payload")

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


def save_train_state(path, iteration: int, adam_step: int, moments: list[tuple[np.ndarray, np.ndarray]]) -> None:
    """Optimizer first/second moments in parameter order, plus positions."""
    with open(path, "wb") as f:
        f.write(STATE_MAGIC)
        f.write(struct.pack("<IQQI", VERSION, iteration, adam_step, len(moments)))
        for m, v in moments:
            f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_train_state(path, shapes: list[tuple[int, ...]]):
    raw = Path(path).read_bytes()
    if raw[:4] != STATE_MAGIC:
        raise ValueError(f"{path}: not a training-state file (bad magic)")
    version, iteration, adam_step, count = struct.unpack_from("<IQQI", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported state version {version}")
    if count != len(shapes):
        raise ValueError(f"{path}: state holds {count} moment pairs, expected {len(shapes)}")
    offset = 4 + struct.calcsize("<IQQI")
    moments = []
    for shape in shapes:
        n = int(np.prod(shape))
        m = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset += 4 * n
        v = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset += 4 * n
        moments.append((m, v))
    return iteration, adam_step, moments
