"""Number formats, grids, and codecs for weight quantization.

Bit-exact idempotence is a contract here: feeding a decoded tensor back
through the same quantizer must reproduce every code and value. The range
derivations are arranged so each re-derived parameter is a fixed point:

  - integer grids anchor the range at zero (rmin <= 0 <= rmax per group) and
    the top code decodes to the stored range endpoint, so endpoints survive a
    round trip exactly;
  - FP8 scales carry at most 11 significand bits, making code*scale exact in
    float32 (E4M3 values hold at most 4 significand bits);
  - NVFP4 global scales are powers of two and block scales round up in E4M3,
    so every block absmax lands exactly on the top element value.

Encoding picks the nearest representable value with ties going to the even
code, i.e. round-half-to-even on the grid.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

F32 = np.float32
E4M3_MAX = 448.0
E2M1_VALUES = (0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0)
NVFP4_BLOCK = 16

__all__ = [
    "QuantFormat",
    "QuantAux",
    "QuantizedTensor",
    "parse_format",
    "quant_grid",
    "compute_aux",
    "apply_aux",
    "apply_aux_columns",
    "fake_quant",
    "quantize_tensor",
    "dequantize",
    "bf16_round",
    "round_sig",
    "e4m3_decode_table",
    "e4m3_encode",
    "e4m3_decode",
    "pack_codes",
    "pack_tensor_codes",
    "unpack_codes",
]


# ---------------------------------------------------------------- formats


@dataclass(frozen=True)
class QuantFormat:
    """A target number format plus its grouping and usage scope."""

    kind: str                       # int | fp8_e4m3 | nvfp4 | bf16
    bits: int = 0                   # int only
    group_size: int = 0             # int: along input dim; nvfp4: 16; 0 = whole row
    affine: bool = True             # int only; False = symmetric, no offset
    scope: str = "weight"           # weight | weight+activation

    def __post_init__(self):
        if self.kind not in ("int", "fp8_e4m3", "nvfp4", "bf16"):
            raise ValueError(f"unknown format kind {self.kind!r}")
        if self.kind == "int":
            if self.bits not in (2, 3, 4, 6):
                raise ValueError(f"int bits must be one of 2/3/4/6, got {self.bits}")
            if self.group_size < 0:
                raise ValueError("group_size must be >= 0")
        if self.kind == "nvfp4" and self.group_size not in (0, NVFP4_BLOCK):
            raise ValueError("nvfp4 uses fixed blocks of 16")
        if self.scope not in ("weight", "weight+activation"):
            raise ValueError(f"bad scope {self.scope!r}")

    @property
    def name(self) -> str:
        if self.kind == "int":
            g = self.group_size or 0
            return f"int{self.bits}g{g}" + ("" if self.affine else "sym")
        return {"fp8_e4m3": "fp8", "nvfp4": "nvfp4", "bf16": "bf16"}[self.kind]

    @property
    def bits_per_element(self) -> int:
        """Payload bits for one weight, excluding scale/offset overhead."""
        return {"int": self.bits, "fp8_e4m3": 8, "nvfp4": 4, "bf16": 16}[self.kind]


_INT_RE = re.compile(r"^int([2346])g(\d+)(sym)?$")


def parse_format(text: str) -> QuantFormat:
    """Format string -> QuantFormat: int{2,3,4,6}g<G>[sym], fp8, nvfp4, bf16."""
    text = text.strip().lower()
    m = _INT_RE.match(text)
    if m:
        return QuantFormat(
            "int", bits=int(m.group(1)), group_size=int(m.group(2)),
            affine=m.group(3) is None,
        )
    if text == "fp8":
        return QuantFormat("fp8_e4m3", scope="weight+activation")
    if text == "nvfp4":
        return QuantFormat("nvfp4", group_size=NVFP4_BLOCK, scope="weight+activation")
    if text == "bf16":
        return QuantFormat("bf16")
    raise ValueError(f"unrecognized format {text!r}")


# ---------------------------------------------------------------- scalar helpers


def round_sig(x: np.ndarray, bits: int) -> np.ndarray:
    """Round magnitudes to `bits` significand bits (round-half-even)."""
    x = np.asarray(x, dtype=F32)
    m, e = np.frexp(x)
    return np.ldexp(np.round(m * (1 << bits)) / F32(1 << bits), e).astype(F32)


def bf16_round(x: np.ndarray) -> np.ndarray:
    """Round float32 to the nearest bfloat16 value (round-half-even)."""
    x = np.ascontiguousarray(x, dtype=F32)
    u = x.view(np.uint32)
    rounded = (u + np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1))) & np.uint32(
        0xFFFF0000
    )
    return rounded.view(F32).copy()


def _pow2_ceil(x: np.ndarray) -> np.ndarray:
    """Smallest power of two >= x (x > 0), exact for exact powers."""
    m, e = np.frexp(np.asarray(x, dtype=F32))
    return np.where(m == 0.5, np.ldexp(F32(1.0), e - 1), np.ldexp(F32(1.0), e)).astype(F32)


# ---------------------------------------------------------------- E4M3 / E2M1


@lru_cache(maxsize=1)
def e4m3_decode_table() -> np.ndarray:
    """(256,) value per code; the two NaN codes decode to NaN."""
    out = np.empty(256, dtype=F32)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        e = (code >> 3) & 0xF
        mant = code & 0x7
        if e == 0xF and mant == 0x7:
            out[code] = np.nan
        elif e == 0:
            out[code] = sign * (mant / 8.0) * 2.0 ** (-6)
        else:
            out[code] = sign * (1.0 + mant / 8.0) * 2.0 ** (e - 7)
    return out


@lru_cache(maxsize=1)
def _e4m3_nonneg() -> tuple[np.ndarray, np.ndarray]:
    """Sorted nonnegative finite values and their codes (127 entries)."""
    table = e4m3_decode_table()
    codes = np.arange(128, dtype=np.uint8)
    vals = table[:128]
    keep = np.isfinite(vals)
    order = np.argsort(vals[keep], kind="stable")
    return vals[keep][order], codes[keep][order]


def _nearest_on_grid(mag: np.ndarray, vals: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the nearest grid value for each magnitude, ties to even code."""
    pos = np.searchsorted(vals, mag)
    lo = np.clip(pos - 1, 0, len(vals) - 1)
    hi = np.clip(pos, 0, len(vals) - 1)
    d_lo = np.abs(mag - vals[lo])
    d_hi = np.abs(vals[hi] - mag)
    even_hi = (codes[hi] & 1) == 0
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & even_hi)
    return np.where(pick_hi, hi, lo)


def e4m3_encode(x: np.ndarray, rounding: str = "nearest") -> np.ndarray:
    """Finite float32 -> E4M3 code, saturating at +-448.

    rounding "nearest" is round-half-to-even; "up" picks the smallest value
    >= x (used for block scales that must never undershoot).
    """
    x = np.asarray(x, dtype=F32)
    vals, codes = _e4m3_nonneg()
    mag = np.minimum(np.abs(x), F32(E4M3_MAX))
    if rounding == "nearest":
        idx = _nearest_on_grid(mag, vals, codes)
    elif rounding == "up":
        idx = np.minimum(np.searchsorted(vals, mag), len(vals) - 1)
    else:
        raise ValueError(f"bad rounding {rounding!r}")
    code = codes[idx].astype(np.uint8)
    neg = (x < 0) & (vals[idx] != 0)
    return np.where(neg, code | np.uint8(0x80), code).astype(np.uint8)


def e4m3_decode(code: np.ndarray) -> np.ndarray:
    return e4m3_decode_table()[np.asarray(code, dtype=np.uint8)]


@lru_cache(maxsize=1)
def _e2m1_nonneg() -> tuple[np.ndarray, np.ndarray]:
    vals = np.array(E2M1_VALUES, dtype=F32)
    codes = np.arange(8, dtype=np.uint8)
    return vals, codes


def _e2m1_encode(x: np.ndarray) -> np.ndarray:
    """Finite float32 -> 4-bit sign/magnitude E2M1 code, saturating at +-6."""
    x = np.asarray(x, dtype=F32)
    vals, codes = _e2m1_nonneg()
    idx = _nearest_on_grid(np.minimum(np.abs(x), F32(6.0)), vals, codes)
    code = codes[idx]
    neg = (x < 0) & (idx != 0)
    return np.where(neg, code | np.uint8(0x8), code).astype(np.uint8)


def _e2m1_decode(code: np.ndarray) -> np.ndarray:
    vals, _ = _e2m1_nonneg()
    mag = vals[code & 0x7]
    return np.where(code & 0x8, -mag, mag).astype(F32)


# ---------------------------------------------------------------- grids


def quant_grid(fmt: QuantFormat) -> np.ndarray:
    """Representable values per unit scale, sorted ascending."""
    if fmt.kind == "int":
        if fmt.affine:
            return np.arange(0, (1 << fmt.bits), dtype=F32)
        q = (1 << (fmt.bits - 1)) - 1
        return np.arange(-q, q + 1, dtype=F32)
    if fmt.kind == "fp8_e4m3":
        table = e4m3_decode_table()
        finite = table[np.isfinite(table)]
        return np.unique(finite.astype(F32))
    if fmt.kind == "nvfp4":
        mags = np.array(E2M1_VALUES, dtype=F32)
        return np.unique(np.concatenate([-mags, mags])) + F32(0.0)
    raise ValueError(f"format {fmt.name!r} has no enumerable grid")


# ---------------------------------------------------------------- aux (ranges)


@dataclass
class QuantAux:
    """Frozen range parameters so many tensors can share one lattice.

    int affine: lo/hi are per-group zero-anchored range endpoints.
    int symmetric: hi is the per-group absmax (lo unused).
    fp8: scale is the per-output-channel 11-bit significand scale.
    nvfp4: global power-of-two scale plus per-block E4M3 scale codes.
    """

    fmt: QuantFormat
    shape: tuple[int, ...]
    lo: np.ndarray | None = None            # (out, n_groups) f32
    hi: np.ndarray | None = None            # (out, n_groups) f32
    scale: np.ndarray | None = None         # (out,) f32 for fp8
    global_scale: float | None = None       # nvfp4
    block_codes: np.ndarray | None = None   # (out, n_blocks) uint8 for nvfp4

    def group_scales(self) -> np.ndarray:
        """Decoded per-group (or per-row/per-block) scale factors."""
        fmt = self.fmt
        if fmt.kind == "int":
            if fmt.affine:
                m = F32((1 << fmt.bits) - 1)
                s = ((self.hi - self.lo) / m).astype(F32)
            else:
                q = F32((1 << (fmt.bits - 1)) - 1)
                s = (self.hi / q).astype(F32)
            return np.where(s > 0, s, F32(1.0)).astype(F32)
        if fmt.kind == "fp8_e4m3":
            return self.scale
        if fmt.kind == "nvfp4":
            return (e4m3_decode(self.block_codes) * F32(self.global_scale)).astype(F32)
        raise ValueError(f"no scales for {fmt.name}")


def _group_view(x: np.ndarray, group: int) -> tuple[np.ndarray, int]:
    """Zero-pad the input dim to a multiple of `group`; (out, ng, G) view."""
    out, cin = x.shape
    g = group if group > 0 else cin
    ng = -(-cin // g)
    if ng * g != cin:
        xp = np.zeros((out, ng * g), dtype=F32)
        xp[:, :cin] = x
    else:
        xp = x
    return xp.reshape(out, ng, g), g


def compute_aux(x: np.ndarray, fmt: QuantFormat) -> QuantAux:
    """Derive range parameters from data; groups run along the input dim."""
    x = np.ascontiguousarray(x, dtype=F32)
    if x.ndim != 2:
        raise ValueError("quantization expects a 2-D (out, in) tensor")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite values in tensor to quantize")

    if fmt.kind == "bf16":
        return QuantAux(fmt, x.shape)

    if fmt.kind == "int":
        xg, _ = _group_view(x, fmt.group_size)
        if fmt.affine:
            lo = np.minimum(xg.min(axis=-1), F32(0.0)).astype(F32)
            hi = np.maximum(xg.max(axis=-1), F32(0.0)).astype(F32)
            width = hi.astype(np.float64) - lo.astype(np.float64)
            if not np.all(np.isfinite(width.astype(F32))):
                raise ValueError(
                    "affine group range width overflows float32; rescale weights first"
                )
            return QuantAux(fmt, x.shape, lo=lo, hi=hi)
        amax = np.abs(xg).max(axis=-1).astype(F32)
        return QuantAux(fmt, x.shape, hi=amax)

    if fmt.kind == "fp8_e4m3":
        amax = np.abs(x).max(axis=-1).astype(F32)
        s = round_sig(amax / F32(E4M3_MAX), 11)
        s = np.where(s > 0, s, F32(1.0)).astype(F32)
        return QuantAux(fmt, x.shape, scale=s)

    # nvfp4: power-of-two global scale, round-up E4M3 block scales
    amax = F32(np.abs(x).max()) if x.size else F32(0.0)
    if amax == 0:
        gscale = 1.0
    else:
        gscale = float(_pow2_ceil(amax / F32(6.0 * E4M3_MAX)))
    xg, _ = _group_view(x, NVFP4_BLOCK)
    bmax = np.abs(xg).max(axis=-1).astype(F32)
    ratio = bmax / F32(6.0 * gscale)
    codes = e4m3_encode(ratio, rounding="up")
    codes = np.where(bmax > 0, codes, e4m3_encode(np.ones_like(ratio)))
    return QuantAux(fmt, x.shape, global_scale=gscale, block_codes=codes.astype(np.uint8))


# ---------------------------------------------------------------- encoding


def _int_lattice(q: np.ndarray, lo, hi, s, fmt: QuantFormat) -> np.ndarray:
    """Decoded value at integer code q; top (and bottom) codes snap to the
    stored range endpoints so endpoints survive round trips bit-exactly."""
    qf = q.astype(F32)
    if fmt.affine:
        m = (1 << fmt.bits) - 1
        v = (lo + qf * s).astype(F32)
        return np.where(q >= m, hi, v).astype(F32)
    top = (1 << (fmt.bits - 1)) - 1
    v = (qf * s).astype(F32)
    v = np.where(q >= top, hi, v)
    return np.where(q <= -top, -hi, v).astype(F32)


def _int_encode_elem(x: np.ndarray, lo, hi, s, fmt: QuantFormat):
    """Nearest-code encode with per-element range arrays -> (q, y, clipped)."""
    if fmt.affine:
        m_top = (1 << fmt.bits) - 1
        h = ((x - lo) / s).astype(F32)
        lo_code, hi_code = 0, m_top
    else:
        m_top = (1 << (fmt.bits - 1)) - 1
        h = (x / s).astype(F32)
        lo_code, hi_code = -m_top, m_top
    near = np.rint(h)
    clipped = (near < lo_code) | (near > hi_code)
    q0 = np.clip(np.floor(h), lo_code, hi_code - 1).astype(np.int32)
    v0 = _int_lattice(q0, lo, hi, s, fmt)
    v1 = _int_lattice(q0 + 1, lo, hi, s, fmt)
    d0 = np.abs(x - v0)
    d1 = np.abs(v1 - x)
    even1 = ((q0 + 1) & 1) == 0
    take1 = (d1 < d0) | ((d1 == d0) & even1)
    q = np.where(take1, q0 + 1, q0)
    y = np.where(take1, v1, v0).astype(F32)
    return q, y, clipped


def _encode_int(x: np.ndarray, aux: QuantAux):
    fmt = aux.fmt
    xg, _ = _group_view(x, fmt.group_size)
    s = aux.group_scales()[..., None]
    lo = aux.lo[..., None] if fmt.affine else None
    hi = aux.hi[..., None]
    q, y, clipped = _int_encode_elem(xg, lo, hi, s, fmt)
    out, cin = aux.shape
    lo_code = 0 if fmt.affine else -((1 << (fmt.bits - 1)) - 1)
    flat_q = q.reshape(out, -1)[:, :cin]
    flat_y = y.reshape(out, -1)[:, :cin]
    flat_c = clipped.reshape(out, -1)[:, :cin]
    codes = (flat_q - lo_code).astype(np.uint8)  # shift symmetric codes to >= 0
    return codes, flat_y, flat_c


def _encode_fp8(x: np.ndarray, aux: QuantAux):
    s = aux.scale[:, None]
    u = (x / s).astype(F32)
    codes = e4m3_encode(u)
    y = (e4m3_decode(codes) * s).astype(F32)
    clipped = np.abs(u) > F32(E4M3_MAX)
    return codes, y, clipped


def _encode_nvfp4(x: np.ndarray, aux: QuantAux):
    out, cin = aux.shape
    xg, _ = _group_view(x, NVFP4_BLOCK)
    bs = aux.group_scales()[..., None]
    u = (xg / bs).astype(F32)
    codes = _e2m1_encode(u)
    y = (_e2m1_decode(codes) * bs).astype(F32)
    clipped = np.abs(u) > F32(6.0)
    return (
        codes.reshape(out, -1)[:, :cin],
        y.reshape(out, -1)[:, :cin],
        clipped.reshape(out, -1)[:, :cin],
    )


def apply_aux_columns(
    x: np.ndarray, aux: QuantAux, cols: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encode a column subset (out, len(cols)) against aux's frozen lattice.

    Produces exactly what apply_aux would for those columns; used by solvers
    that revise columns sequentially while keeping the RTN grid.
    """
    x = np.ascontiguousarray(x, dtype=F32)
    cols = np.atleast_1d(np.asarray(cols, dtype=np.int64))
    if x.ndim == 1:
        x = x[:, None]
    fmt = aux.fmt
    if fmt.kind == "bf16":
        y = bf16_round(x)
        u16 = (y.view(np.uint32) >> np.uint32(16)).astype(np.uint16)
        return u16, y, np.zeros(x.shape, dtype=bool)
    if fmt.kind == "int":
        g = fmt.group_size if fmt.group_size > 0 else aux.shape[1]
        gid = cols // g
        s = aux.group_scales()[:, gid]
        hi = aux.hi[:, gid]
        lo = aux.lo[:, gid] if fmt.affine else None
        q, y, clipped = _int_encode_elem(x, lo, hi, s, fmt)
        lo_code = 0 if fmt.affine else -((1 << (fmt.bits - 1)) - 1)
        return (q - lo_code).astype(np.uint8), y, clipped
    if fmt.kind == "fp8_e4m3":
        return _encode_fp8(x, aux)
    bid = cols // NVFP4_BLOCK
    bs = aux.group_scales()[:, bid]
    u = (x / bs).astype(F32)
    codes = _e2m1_encode(u)
    y = (_e2m1_decode(codes) * bs).astype(F32)
    return codes, y, np.abs(u) > F32(6.0)


def apply_aux(x: np.ndarray, aux: QuantAux) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encode x against a fixed lattice -> (codes, decoded, clipped).

    `clipped` marks elements whose nearest pre-clamp code fell outside the
    code range; with ranges derived from x itself nothing clips.
    """
    x = np.ascontiguousarray(x, dtype=F32)
    if x.shape != aux.shape:
        raise ValueError(f"shape {x.shape} does not match aux shape {aux.shape}")
    if aux.fmt.kind == "bf16":
        y = bf16_round(x)
        u16 = (y.view(np.uint32) >> np.uint32(16)).astype(np.uint16)
        return u16, y, np.zeros(x.shape, dtype=bool)
    if aux.fmt.kind == "int":
        return _encode_int(x, aux)
    if aux.fmt.kind == "fp8_e4m3":
        return _encode_fp8(x, aux)
    return _encode_nvfp4(x, aux)


def fake_quant(x: np.ndarray, fmt: QuantFormat) -> np.ndarray:
    """decode(encode(x)) with ranges derived from x; bit-exactly idempotent."""
    _, y, _ = apply_aux(x, compute_aux(x, fmt))
    return y


# ---------------------------------------------------------------- packing


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack small unsigned codes `bits` at a time, little-endian within bytes."""
    flat = np.ascontiguousarray(codes, dtype=np.uint8).reshape(-1)
    bit_rows = ((flat[:, None] >> np.arange(bits, dtype=np.uint8)) & 1).astype(np.uint8)
    stream = bit_rows.reshape(-1)
    pad = (-stream.size) % 8
    if pad:
        stream = np.concatenate([stream, np.zeros(pad, dtype=np.uint8)])
    return np.packbits(stream.reshape(-1, 8), axis=-1, bitorder="little").reshape(-1)


def unpack_codes(raw: np.ndarray, bits: int, count: int) -> np.ndarray:
    stream = np.unpackbits(np.ascontiguousarray(raw, dtype=np.uint8), bitorder="little")
    stream = stream[: count * bits].reshape(count, bits)
    weights = (1 << np.arange(bits, dtype=np.uint16)).astype(np.uint16)
    return (stream.astype(np.uint16) * weights).sum(axis=-1).astype(np.uint8)


def pack_tensor_codes(codes: np.ndarray, fmt: QuantFormat) -> np.ndarray:
    """Bit-pack sub-byte integer codes; byte-width code formats pass through."""
    if fmt.kind == "int":
        return pack_codes(codes, fmt.bits)
    if fmt.kind == "nvfp4":
        return pack_codes(codes, 4)
    return codes


# ---------------------------------------------------------------- container


@dataclass
class QuantizedTensor:
    """Packed codes plus the range parameters needed to decode them."""

    fmt: QuantFormat
    shape: tuple[int, ...]
    codes: np.ndarray               # packed uint8 (uint16 raw for bf16)
    aux: QuantAux

    def decode(self) -> np.ndarray:
        out, cin = self.shape
        fmt = self.fmt
        if fmt.kind == "bf16":
            u = self.codes.astype(np.uint32).reshape(out, cin) << np.uint32(16)
            return u.view(F32).copy()
        if fmt.kind == "int":
            lo_code = 0 if fmt.affine else -((1 << (fmt.bits - 1)) - 1)
            g = fmt.group_size if fmt.group_size > 0 else cin
            ng = -(-cin // g)
            q = unpack_codes(self.codes, fmt.bits, out * cin).astype(np.int32) + lo_code
            qg = np.full((out, ng * g), lo_code, dtype=np.int32)
            qg[:, :cin] = q.reshape(out, cin)
            s = self.aux.group_scales()[..., None]
            lo = self.aux.lo[..., None] if fmt.affine else None
            v = _int_lattice(qg.reshape(out, ng, g), lo, self.aux.hi[..., None], s, fmt)
            return v.reshape(out, -1)[:, :cin].astype(F32)
        if fmt.kind == "fp8_e4m3":
            c = self.codes.reshape(out, cin)
            return (e4m3_decode(c) * self.aux.scale[:, None]).astype(F32)
        q = unpack_codes(self.codes, 4, out * cin)
        ng = self.aux.block_codes.shape[1]
        qg = np.zeros((out, ng * NVFP4_BLOCK), dtype=np.uint8)
        qg[:, :cin] = q.reshape(out, cin)
        v = _e2m1_decode(qg.reshape(out, ng, NVFP4_BLOCK)) * self.aux.group_scales()[..., None]
        return v.reshape(out, -1)[:, :cin].astype(F32)

    @property
    def nbytes(self) -> int:
        """Serialized payload size: codes plus scales/offsets/metadata."""
        fmt = self.fmt
        n = int(np.prod(self.shape))
        if fmt.kind == "bf16":
            return 2 * n
        if fmt.kind == "int":
            code_bytes = -(-n * fmt.bits // 8)
            groups = self.aux.hi.size
            per_group = 8 if fmt.affine else 4  # lo+hi vs absmax, f32 each
            return code_bytes + groups * per_group
        if fmt.kind == "fp8_e4m3":
            return n + 4 * self.aux.scale.size
        return -(-n * 4 // 8) + self.aux.block_codes.size + 4


def quantize_tensor(x: np.ndarray, fmt: QuantFormat, aux: QuantAux | None = None) -> QuantizedTensor:
    """Encode a 2-D tensor into packed codes (ranges from x unless given)."""
    x = np.ascontiguousarray(x, dtype=F32)
    if aux is None:
        aux = compute_aux(x, fmt)
    codes, _, _ = apply_aux(x, aux)
    return QuantizedTensor(fmt, x.shape, pack_tensor_codes(codes, fmt), aux)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    return qt.decode()
