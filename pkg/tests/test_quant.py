"""Quantization codecs, PTQ methods, fusion, STE, recovery, and storage."""

from __future__ import annotations

import struct

import numpy as np
import pytest

import kdlab.autodiff as ad
from kdlab.autodiff import Tape
from kdlab.model import DESK_PRESETS, build_model, forward_batch
from kdlab.quant import (
    bf16_round,
    calib_hessian,
    capture_calibration,
    column_norms,
    e4m3_decode,
    e4m3_decode_table,
    e4m3_encode,
    fake_quant,
    fuse_norms,
    gptq_quantize,
    load_quantized_model,
    pack_codes,
    parse_format,
    qad,
    quant_error_trace,
    quant_grid,
    quantize_model,
    quantize_tensor,
    rtn_quantize,
    save_quantized_model,
    unpack_codes,
)
from kdlab.quant.formats import E2M1_VALUES, compute_aux, round_sig
from kdlab.quant.qad import fake_quant_weights, make_act_transform, recovery, ste_fake_quant

ALL_FORMATS = ["int4g64", "int4g32sym", "int3g16", "int3g64", "int2g16", "fp8", "nvfp4", "bf16"]


# ---- format parsing ----


def test_parse_format_round_trips():
    fmt = parse_format("int4g64")
    assert fmt.kind == "int" and fmt.bits == 4 and fmt.group_size == 64 and fmt.affine
    sym = parse_format("int4g32sym")
    assert not sym.affine and sym.group_size == 32
    assert parse_format("fp8").kind == "fp8_e4m3"
    assert parse_format("nvfp4").kind == "nvfp4"
    assert parse_format("bf16").kind == "bf16"


def test_parse_format_rejects_junk():
    for bad in ("int9g64", "int5g16", "fp7", "", "int4gx"):
        with pytest.raises(ValueError):
            parse_format(bad)


def test_parse_format_group_zero_means_whole_row():
    fmt = parse_format("int4g0")
    x = np.random.default_rng(99).standard_normal((4, 80)).astype(np.float32)
    aux = compute_aux(x, fmt)
    assert aux.hi.shape == (4, 1)


# ---- E4M3 codec against an exhaustive bit-field oracle ----


def e4m3_oracle_table():
    vals = np.empty(256, dtype=np.float32)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        e = (code >> 3) & 0xF
        m = code & 0x7
        if e == 15 and m == 7:
            vals[code] = np.nan
        elif e == 0:
            vals[code] = sign * m * 2.0**-9  # subnormal: m/8 * 2^-6
        else:
            vals[code] = sign * (1 + m / 8.0) * 2.0 ** (e - 7)
    return vals


def test_e4m3_table_matches_oracle():
    table = e4m3_decode_table()
    oracle = e4m3_oracle_table()
    np.testing.assert_array_equal(np.isnan(table), np.isnan(oracle))
    finite = ~np.isnan(oracle)
    np.testing.assert_array_equal(table[finite], oracle[finite])
    assert np.nanmax(np.abs(table[finite])) == 448.0


def test_e4m3_encode_is_nearest_value():
    oracle = e4m3_oracle_table()
    finite_codes = np.flatnonzero(~np.isnan(oracle))
    finite_vals = oracle[finite_codes]
    rng = np.random.default_rng(0)
    x = (rng.standard_normal(4000) * rng.choice([0.01, 1.0, 100.0], 4000)).astype(np.float32)
    codes = e4m3_encode(x)
    decoded = e4m3_decode(codes)
    for xv, dv in zip(x, decoded):
        target = np.clip(xv, -448.0, 448.0)
        best = np.min(np.abs(finite_vals - target))
        assert abs(dv - target) == best, (xv, dv)


def test_e4m3_halfway_ties_choose_even_code():
    # midpoint of 1.0 (code 0b0111000 = 56) and 1.125 (57) is exactly 1.0625
    c = e4m3_encode(np.float32(1.0625))
    assert int(c) % 2 == 0
    assert float(e4m3_decode(c)) == 1.0


def test_e4m3_saturates_not_overflows():
    codes = e4m3_encode(np.array([1e6, -1e6], dtype=np.float32))
    np.testing.assert_array_equal(e4m3_decode(codes), [448.0, -448.0])


# ---- NVFP4 element grid ----


def test_nvfp4_element_grid_is_fifteen_values():
    grid = quant_grid(parse_format("nvfp4"))
    expect = sorted({s * v for v in E2M1_VALUES for s in (1.0, -1.0)})
    assert len(expect) == 15
    np.testing.assert_array_equal(grid, expect)


# ---- INT codecs against brute-force nearest-grid oracles ----


def lattice_for_group(aux, fmt, row, group):
    """Every decodable value of one group (code endpoints snap to the stored
    range), matching the decoder's float32 arithmetic exactly."""
    s = np.float32(aux.group_scales()[row, group])
    if fmt.affine:
        m = (1 << fmt.bits) - 1
        lo = np.float32(aux.lo[row, group])
        q = np.arange(m + 1, dtype=np.float32)
        vals = (lo + q * s).astype(np.float32)
        vals[-1] = aux.hi[row, group]
    else:
        top = (1 << (fmt.bits - 1)) - 1
        q = np.arange(-top, top + 1, dtype=np.float32)
        vals = (q * s).astype(np.float32)
        vals[0] = -aux.hi[row, group]
        vals[-1] = aux.hi[row, group]
    return vals


@pytest.mark.parametrize("fname", ["int4g16", "int4g16sym", "int3g16", "int2g16"])
def test_int_fake_quant_matches_brute_force(fname):
    fmt = parse_format(fname)
    rng = np.random.default_rng(0)
    x = (rng.standard_normal((625, 16)) * rng.uniform(0.01, 10, (625, 1))).astype(np.float32)
    aux = compute_aux(x, fmt)
    y = fake_quant(x, fmt)
    for r in range(x.shape[0]):
        vals = lattice_for_group(aux, fmt, r, 0)
        d = np.abs(vals[None, :] - x[r][:, None])  # (16, n_codes) float32
        np.testing.assert_array_equal(np.abs(y[r] - x[r]), d.min(axis=1))
    assert x.size == 10_000


@pytest.mark.parametrize("fname", ALL_FORMATS)
def test_idempotence_bit_exact(fname):
    fmt = parse_format(fname)
    rng = np.random.default_rng(1)
    for shape in [(8, 64), (5, 48), (16, 16)]:
        for scale in (1e-3, 1.0, 1e3):
            x = (rng.standard_normal(shape) * scale).astype(np.float32)
            y = fake_quant(x, fmt)
            np.testing.assert_array_equal(fake_quant(y, fmt), y)


@pytest.mark.parametrize("fname", ["int4g16", "int3g16sym", "nvfp4", "fp8"])
def test_idempotence_with_subnormal_groups(fname):
    fmt = parse_format(fname)
    rng = np.random.default_rng(2)
    x = (rng.standard_normal((4, 16)) * 1e-42).astype(np.float32)
    y = fake_quant(x, fmt)
    np.testing.assert_array_equal(fake_quant(y, fmt), y)


def test_all_zero_group_codes_to_zero():
    for fname in ("int4g16", "int4g16sym", "fp8", "nvfp4"):
        fmt = parse_format(fname)
        x = np.zeros((3, 16), dtype=np.float32)
        np.testing.assert_array_equal(fake_quant(x, fmt), x)


def test_affine_range_overflow_raises():
    fmt = parse_format("int2g16")
    x = np.full((1, 16), 3e38, dtype=np.float32)
    x[0, 0] = -3e38  # lo..hi span exceeds float32
    with np.errstate(over="ignore"), pytest.raises(ValueError):
        fake_quant(x, fmt)


def test_fp8_scale_is_short_significand():
    fmt = parse_format("fp8")
    rng = np.random.default_rng(3)
    x = (rng.standard_normal((6, 32)) * 7).astype(np.float32)
    aux = compute_aux(x, fmt)
    amax = np.abs(x).max(axis=1)
    np.testing.assert_array_equal(aux.scale, round_sig((amax / 448.0).astype(np.float32), 11))


# ---- bf16 rounding against a struct-based oracle ----


def bf16_oracle(v: float) -> float:
    (bits,) = struct.unpack("<I", struct.pack("<f", np.float32(v)))
    low = bits & 0xFFFF
    hi = bits >> 16
    if low > 0x8000 or (low == 0x8000 and (hi & 1)):
        hi += 1
    return struct.unpack("<f", struct.pack("<I", (hi << 16) & 0xFFFFFFFF))[0]


def test_bf16_round_matches_oracle():
    rng = np.random.default_rng(4)
    vals = list((rng.standard_normal(500) * rng.choice([1e-30, 1.0, 1e30], 500)).astype(np.float32))
    vals += [np.float32(1.0 + 2**-9), np.float32(1.0 + 3 * 2**-9), np.float32(0.0)]
    x = np.array(vals, dtype=np.float32)
    got = bf16_round(x)
    expect = np.array([bf16_oracle(float(v)) for v in vals], dtype=np.float32)
    np.testing.assert_array_equal(got, expect)


# ---- packing ----


@pytest.mark.parametrize("bits", [2, 3, 4])
def test_pack_unpack_round_trip(bits):
    rng = np.random.default_rng(5)
    for count in (1, 7, 64, 1000):
        codes = rng.integers(0, 1 << bits, size=count).astype(np.uint8)
        packed = pack_codes(codes, bits)
        assert packed.nbytes == -(-count * bits // 8)
        np.testing.assert_array_equal(unpack_codes(packed, bits, count), codes)


@pytest.mark.parametrize("fname", ALL_FORMATS)
def test_tensor_payload_accounting(fname):
    from kdlab.quant.store import _tensor_sections

    fmt = parse_format(fname)
    rng = np.random.default_rng(6)
    for shape in [(64, 64), (32, 48), (5, 200)]:
        x = rng.standard_normal(shape).astype(np.float32)
        qt = quantize_tensor(x, fmt)
        assert sum(len(b) for _, b in _tensor_sections(qt)) == qt.nbytes


def test_int4_group64_density():
    # codes at 0.5 byte/element plus 8 range bytes per 64-element group:
    # 0.625 bytes/element = 5/16 of bfloat16 storage.
    fmt = parse_format("int4g64")
    x = np.random.default_rng(7).standard_normal((64, 128)).astype(np.float32)
    qt = quantize_tensor(x, fmt)
    assert qt.nbytes == x.size // 2 + (x.size // 64) * 8
    assert qt.nbytes / (2 * x.size) == 5 / 16


# ---- round trips through decode ----


@pytest.mark.parametrize("fname", ALL_FORMATS)
def test_quantize_tensor_decode_matches_fake_quant(fname):
    fmt = parse_format(fname)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((24, 48)).astype(np.float32)
    np.testing.assert_array_equal(quantize_tensor(x, fmt).decode(), fake_quant(x, fmt))


# ---- norm fusion ----


def test_fusion_toy_oracle():
    cfg = DESK_PRESETS["desk-student-s"]
    params = build_model(cfg, seed=0)
    w = params.tensor("layer0.wqkv")
    gain = params.tensor("layer0.attn_gain")
    dim = w.data.shape[1]
    gain.data[:] = 2.5
    w.data[:] = 0.0
    w.data[0, :] = np.linspace(0.5, 2.0, dim)  # per-column norm = |w[0, c]|
    c = column_norms(w.data)
    t = c.mean(dtype=np.float32)
    fused = fuse_norms(params)
    norms = column_norms(fused.tensor("layer0.wqkv").data)
    np.testing.assert_allclose(norms, t, rtol=1e-6)  # equalized to the mean
    np.testing.assert_allclose(
        fused.tensor("layer0.attn_gain").data, 2.5 * c / t, rtol=1e-6)


def test_fusion_preserves_function():
    cfg = DESK_PRESETS["desk-student-m"]
    params = build_model(cfg, seed=1).copy(dtype=np.float64)
    fused = fuse_norms(params)
    toks = np.random.default_rng(0).integers(0, 256, size=(2, 24))
    with Tape():
        a = forward_batch(params, toks, None).data
        b = forward_batch(fused, toks, None).data
    assert np.max(np.abs(a - b)) < 1e-10
    np.testing.assert_array_equal(a.argmax(-1), b.argmax(-1))


def test_fusion_equalizes_every_gated_projection():
    cfg = DESK_PRESETS["desk-student-m"]
    fused = fuse_norms(build_model(cfg, seed=2))
    for layer in range(cfg.layers):
        for name in (f"layer{layer}.wqkv", f"layer{layer}.wup"):
            norms = column_norms(fused.tensor(name).data)
            np.testing.assert_allclose(norms, norms.mean(), rtol=1e-6)


def test_fusion_is_idempotent_up_to_tolerance():
    cfg = DESK_PRESETS["desk-student-s"]
    once = fuse_norms(build_model(cfg, seed=9))
    twice = fuse_norms(once)
    for (_, a), (_, b) in zip(once.named_tensors(), twice.named_tensors()):
        np.testing.assert_allclose(a.data, b.data, rtol=1e-5, atol=1e-7)


def test_fusion_leaves_original_untouched():
    cfg = DESK_PRESETS["desk-student-s"]
    params = build_model(cfg, seed=3)
    before = params.tensor("layer0.wqkv").data.copy()
    fuse_norms(params)
    np.testing.assert_array_equal(params.tensor("layer0.wqkv").data, before)


# ---- GPTQ ----


@pytest.mark.parametrize("fname", ["int4g64", "int3g16", "nvfp4", "fp8"])
def test_gptq_identity_hessian_equals_rtn(fname):
    fmt = parse_format(fname)
    rng = np.random.default_rng(9)
    w = rng.standard_normal((32, 48)).astype(np.float32)
    a, b = rtn_quantize(w, fmt), gptq_quantize(w, np.eye(48), fmt)
    np.testing.assert_array_equal(a.codes, b.codes)
    np.testing.assert_array_equal(a.decode(), b.decode())


def test_gptq_beats_rtn_under_correlated_hessian():
    rng = np.random.default_rng(10)
    fmt = parse_format("int3g32")
    w = rng.standard_normal((48, 32)).astype(np.float32)
    x = rng.standard_normal((256, 32)) @ rng.standard_normal((32, 32))
    h = calib_hessian(x)
    t_rtn = quant_error_trace(w, rtn_quantize(w, fmt).decode(), h)
    t_gptq = quant_error_trace(w, gptq_quantize(w, h, fmt).decode(), h)
    assert t_gptq <= t_rtn
    assert t_gptq < 0.95 * t_rtn  # clearly better, not a fluke


def test_gptq_rejects_bad_hessian():
    rng = np.random.default_rng(11)
    w = rng.standard_normal((8, 8)).astype(np.float32)
    with pytest.raises(ValueError):
        gptq_quantize(w, -np.eye(8), parse_format("int4g8"))
    with pytest.raises(ValueError):
        gptq_quantize(w, np.eye(7), parse_format("int4g8"))


def test_capture_calibration_shapes():
    cfg = DESK_PRESETS["desk-student-s"]
    params = build_model(cfg, seed=0)
    from kdlab.corpus import TokenChunk
    chunks = [TokenChunk(np.arange(16, dtype=np.int32), ()) for _ in range(3)]
    inputs = capture_calibration(params, chunks)
    # every quantized projection gets calibration data; head comes along too
    assert set(params.projection_names()) <= set(inputs)
    for name, x in inputs.items():
        assert x.ndim == 2 and x.shape[0] == 3 * 16
        h = calib_hessian(x)
        assert h.shape == (x.shape[1], x.shape[1])
        np.linalg.cholesky(h)  # positive definite by construction


# ---- straight-through estimator ----


def test_ste_gradient_exact_when_unclipped():
    fmt = parse_format("int4g16")
    rng = np.random.default_rng(12)
    w_np = rng.standard_normal((4, 16)).astype(np.float32)
    x_np = rng.standard_normal((5, 16)).astype(np.float32)

    w = ad.parameter(w_np.copy())
    with Tape() as tape:
        y = ad.linear(ad.tensor(x_np), ste_fake_quant(w, fmt))
        loss = ad.tsum(ad.mul(y, y))
    g_ste = ad.backward(tape, loss, [w])[w]

    # reference: gradient of the same loss at the decoded weights
    wq = ad.parameter(fake_quant(w_np, fmt))
    with Tape() as tape2:
        y2 = ad.linear(ad.tensor(x_np), wq)
        loss2 = ad.tsum(ad.mul(y2, y2))
    g_ref = ad.backward(tape2, loss2, [wq])[wq]

    # range endpoints are data-derived, so nothing is clipped here
    np.testing.assert_array_equal(g_ste, g_ref)


def test_ste_clipped_coordinates_get_zero_gradient():
    fmt = parse_format("int4g16sym")
    w_np = np.linspace(-1, 1, 32, dtype=np.float32).reshape(2, 16)
    aux = compute_aux(w_np, fmt)
    w_out = w_np.copy()
    w_out[0, 0] = 50.0  # far outside the frozen range
    w = ad.parameter(w_out)
    with Tape() as tape:
        y = ste_fake_quant(w, fmt, aux=aux)
        loss = ad.tsum(y)
    g = ad.backward(tape, loss, [w])[w]
    assert g[0, 0] == 0.0
    np.testing.assert_array_equal(g.ravel()[1:], np.ones(31, dtype=np.float32))


def test_ste_clip_gradient_flag_passes_everything():
    fmt = parse_format("int4g16sym")
    w_np = np.linspace(-1, 1, 16, dtype=np.float32).reshape(1, 16)
    aux = compute_aux(w_np, fmt)
    w_out = w_np.copy()
    w_out[0, 0] = 50.0
    w = ad.parameter(w_out)
    with Tape() as tape:
        loss = ad.tsum(ste_fake_quant(w, fmt, aux=aux, clip_gradient=False))
    g = ad.backward(tape, loss, [w])[w]
    np.testing.assert_array_equal(g, np.ones((1, 16), dtype=np.float32))


# ---- recovery training ----


def test_fake_quant_weights_only_touches_projections():
    cfg = DESK_PRESETS["desk-student-s"]
    params = build_model(cfg, seed=4)
    fq = fake_quant_weights(params, parse_format("int4g16"))
    for name, t in fq.named_tensors():
        if name in params.projection_names():
            np.testing.assert_array_equal(t.data, fake_quant(params.tensor(name).data,
                                                             parse_format("int4g16")))
        else:
            np.testing.assert_array_equal(t.data, params.tensor(name).data)


def test_act_transform_only_for_activation_formats():
    assert make_act_transform(parse_format("int4g64")) is None
    assert make_act_transform(parse_format("bf16")) is None
    hook = make_act_transform(parse_format("fp8"))
    assert callable(hook)
    x = ad.parameter(np.random.default_rng(13).standard_normal((3, 8)).astype(np.float32))
    with Tape() as tape:
        y = hook("layer0.wqkv", x)
        loss = ad.tsum(y)
    g = ad.backward(tape, loss, [x])[x]
    np.testing.assert_array_equal(g, np.ones_like(x.data))  # straight-through
    assert not np.array_equal(y.data, x.data)  # but the forward is quantized


def test_recovery_ratio():
    assert recovery([0.8, 0.6], [0.4, 0.3]) == 50.0
    assert recovery([0.5], [0.5]) == 100.0
    with pytest.raises(ValueError):
        recovery([], [])


# ---- quantized model container and file format ----


def test_quantize_model_splits_projections_and_raw():
    cfg = DESK_PRESETS["desk-student-s"]
    params = build_model(cfg, seed=5)
    qm = quantize_model(params, parse_format("int4g16"))
    assert set(qm.quantized) == set(params.projection_names())
    raw_names = set(qm.raw)
    assert "embedding" in raw_names and "final_gain" in raw_names
    assert raw_names.isdisjoint(qm.quantized)


def test_quantized_file_round_trip(tmp_path):
    cfg = DESK_PRESETS["desk-student-s"]
    params = build_model(cfg, seed=6)
    for fname in ("int4g64", "fp8", "nvfp4", "bf16"):
        qm = quantize_model(params, parse_format(fname), meta={"source": "unit"})
        path = tmp_path / f"m-{fname}.kdqc"
        save_quantized_model(qm, path)
        qm2 = load_quantized_model(path)
        assert qm2.meta["source"] == "unit"
        assert qm2.config == cfg
        assert qm2.storage_bytes == qm.storage_bytes
        for name in qm.quantized:
            np.testing.assert_array_equal(qm.quantized[name].decode(),
                                          qm2.quantized[name].decode())
        for name in qm.raw:
            np.testing.assert_array_equal(qm.raw[name], qm2.raw[name])


def test_quantized_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.kdqc"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError):
        load_quantized_model(path)


def test_quantized_file_detects_truncation(tmp_path):
    cfg = DESK_PRESETS["desk-student-s"]
    qm = quantize_model(build_model(cfg, seed=7), parse_format("int4g64"))
    path = tmp_path / "m.kdqc"
    save_quantized_model(qm, path)
    data = path.read_bytes()
    path.write_bytes(data + b"\x00")
    with pytest.raises(ValueError):
        load_quantized_model(path)


def test_qad_zero_steps_is_identity(tmp_path):
    cfg = DESK_PRESETS["desk-student-s"]
    params = build_model(cfg, seed=8)

    # tiny store so qad can resolve a data stream even for zero steps
    from kdlab.corpus import TokenChunk
    from kdlab.logitstore import generate_logit_shards
    chunks = [TokenChunk(np.arange(16, dtype=np.int32) + i, ()) for i in range(8)]
    generate_logit_shards(
        chunks, lambda t, b: np.zeros((t.shape[0], t.shape[1], 257), np.float32),
        tmp_path, vocab=257, k=4, tokens_per_shard=64, perm_seed=0, batch_size=4)

    res = qad(params, parse_format("int4g16"), tmp_path, steps=0)
    for (n1, t1), (n2, t2) in zip(params.named_tensors(), res.params.named_tensors()):
        np.testing.assert_array_equal(t1.data, t2.data)
