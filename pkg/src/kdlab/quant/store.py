"""Quantized checkpoint files: packed codes plus bf16 side tensors.

Layout: magic, version, a JSON descriptor (model config, per-tensor entries
with format and section byte counts), then the raw payload sections in
descriptor order. Projection weights are stored as packed codes with their
range parameters; everything else (embedding, gains, untied head) is stored
as bfloat16. All multi-byte values are little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..model import ModelConfig, ModelParams, params_from_arrays
from .formats import (
    NVFP4_BLOCK,
    QuantAux,
    QuantFormat,
    QuantizedTensor,
    bf16_round,
    parse_format,
)
from .ptq import gptq_quantize, rtn_quantize

QUANT_MAGIC = b"KDQC"
_VERSION = 1

__all__ = [
    "QuantizedModel",
    "quantize_model",
    "save_quantized_model",
    "load_quantized_model",
    "storage_bytes",
]


@dataclass
class QuantizedModel:
    """A model split into quantized projections and bf16 side tensors."""

    config: ModelConfig
    fmt: QuantFormat
    quantized: dict[str, QuantizedTensor]
    raw: dict[str, np.ndarray]           # float32 values already on the bf16 grid
    meta: dict = field(default_factory=dict)

    def to_params(self) -> ModelParams:
        arrays = {name: qt.decode() for name, qt in self.quantized.items()}
        arrays.update({name: arr.astype(np.float32) for name, arr in self.raw.items()})
        return params_from_arrays(self.config, arrays)

    @property
    def storage_bytes(self) -> int:
        return storage_bytes(self)


def storage_bytes(model: QuantizedModel) -> int:
    """Payload bytes: packed codes + range parameters + bf16 side tensors."""
    total = sum(qt.nbytes for qt in model.quantized.values())
    total += sum(2 * arr.size for arr in model.raw.values())
    return total


def quantize_model(
    params: ModelParams,
    fmt: QuantFormat,
    method: str = "rtn",
    hessians: Mapping[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> QuantizedModel:
    """Quantize every projection; other tensors round to bf16.

    method "rtn" rounds independently; "gptq" needs a per-projection Hessian
    map from calibration data.
    """
    if method not in ("rtn", "gptq"):
        raise ValueError(f"unknown method {method!r} (expected rtn or gptq)")
    if method == "gptq" and hessians is None:
        raise ValueError("gptq needs calibration Hessians")
    quantized: dict[str, QuantizedTensor] = {}
    for name in params.projection_names():
        w = params.tensor(name).data
        if method == "rtn":
            quantized[name] = rtn_quantize(w, fmt)
        else:
            if name not in hessians:
                raise KeyError(f"no Hessian captured for projection {name}")
            quantized[name] = gptq_quantize(w, hessians[name], fmt)
    raw = {
        name: bf16_round(t.data)
        for name, t in params.named_tensors(include_tied_head=False)
        if name not in quantized
    }
    return QuantizedModel(params.config, fmt, quantized, raw, dict(meta or {}))


# ---------------------------------------------------------------- file format


def _tensor_sections(qt: QuantizedTensor) -> list[tuple[str, bytes]]:
    fmt = qt.fmt
    sections = [("codes", np.ascontiguousarray(qt.codes).tobytes())]
    if fmt.kind == "int":
        if fmt.affine:
            sections.append(("lo", np.ascontiguousarray(qt.aux.lo, dtype="<f4").tobytes()))
        sections.append(("hi", np.ascontiguousarray(qt.aux.hi, dtype="<f4").tobytes()))
    elif fmt.kind == "fp8_e4m3":
        sections.append(("scale", np.ascontiguousarray(qt.aux.scale, dtype="<f4").tobytes()))
    elif fmt.kind == "nvfp4":
        sections.append(("block_codes", np.ascontiguousarray(qt.aux.block_codes).tobytes()))
        sections.append(("global_scale", struct.pack("<f", qt.aux.global_scale)))
    return sections


def save_quantized_model(model: QuantizedModel, path) -> None:
    entries = []
    payload = bytearray()
    for name, qt in model.quantized.items():
        sections = _tensor_sections(qt)
        entries.append(
            {
                "name": name,
                "kind": "quant",
                "format": qt.fmt.name,
                "scope": qt.fmt.scope,
                "shape": list(qt.shape),
                "sections": [[label, len(blob)] for label, blob in sections],
            }
        )
        for _, blob in sections:
            payload += blob
    for name, arr in model.raw.items():
        u16 = (np.ascontiguousarray(arr, dtype=np.float32).view(np.uint32) >> 16).astype(
            "<u2"
        )
        blob = u16.tobytes()
        entries.append(
            {
                "name": name,
                "kind": "raw-bf16",
                "shape": list(arr.shape),
                "sections": [["values", len(blob)]],
            }
        )
        payload += blob
    desc = {
        "config": json.loads(model.config.to_json()),
        "format": model.fmt.name,
        "meta": model.meta,
        "tensors": entries,
    }
    desc_json = json.dumps(desc, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(QUANT_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(desc_json)))
        f.write(desc_json)
        f.write(bytes(payload))


def _rebuild_aux(fmt: QuantFormat, shape, sections: dict[str, bytes]) -> QuantAux:
    out_dim, in_dim = shape
    if fmt.kind == "int":
        g = fmt.group_size if fmt.group_size > 0 else in_dim
        ng = -(-in_dim // g)
        hi = np.frombuffer(sections["hi"], dtype="<f4").reshape(out_dim, ng).astype(np.float32)
        lo = None
        if fmt.affine:
            lo = np.frombuffer(sections["lo"], dtype="<f4").reshape(out_dim, ng).astype(np.float32)
        return QuantAux(fmt, shape, lo=lo, hi=hi)
    if fmt.kind == "fp8_e4m3":
        scale = np.frombuffer(sections["scale"], dtype="<f4").astype(np.float32)
        return QuantAux(fmt, shape, scale=scale)
    if fmt.kind == "nvfp4":
        nb = -(-in_dim // NVFP4_BLOCK)
        codes = np.frombuffer(sections["block_codes"], dtype=np.uint8).reshape(out_dim, nb)
        (gs,) = struct.unpack("<f", sections["global_scale"])
        return QuantAux(fmt, shape, global_scale=gs, block_codes=codes.copy())
    return QuantAux(fmt, shape)


def load_quantized_model(path) -> QuantizedModel:
    raw_bytes = Path(path).read_bytes()
    if raw_bytes[:4] != QUANT_MAGIC:
        raise ValueError(f"{path}: not a quantized checkpoint (bad magic)")
    version, desc_len = struct.unpack_from("<II", raw_bytes, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    desc = json.loads(raw_bytes[12 : 12 + desc_len].decode())
    config = ModelConfig.from_json(json.dumps(desc["config"]))
    fmt = parse_format(desc["format"])

    offset = 12 + desc_len
    quantized: dict[str, QuantizedTensor] = {}
    raw: dict[str, np.ndarray] = {}
    for entry in desc["tensors"]:
        sections: dict[str, bytes] = {}
        for label, nbytes in entry["sections"]:
            sections[label] = raw_bytes[offset : offset + nbytes]
            offset += nbytes
        shape = tuple(entry["shape"])
        if entry["kind"] == "quant":
            t_fmt = parse_format(entry["format"])
            code_dtype = np.uint16 if t_fmt.kind == "bf16" else np.uint8
            codes = np.frombuffer(sections["codes"], dtype=code_dtype).copy()
            if t_fmt.kind in ("bf16", "fp8_e4m3"):
                codes = codes.reshape(shape)
            quantized[entry["name"]] = QuantizedTensor(
                t_fmt, shape, codes, _rebuild_aux(t_fmt, shape, sections)
            )
        else:
            u16 = np.frombuffer(sections["values"], dtype="<u2").astype(np.uint32)
            arr = (u16 << 16).view(np.float32).reshape(shape).copy()
            raw[entry["name"]] = arr
    if offset != len(raw_bytes):
        raise ValueError(f"{path}: trailing bytes after payload")
    return QuantizedModel(config, fmt, quantized, raw, desc.get("meta", {}))
