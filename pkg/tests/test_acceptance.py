"""Acceptance battery: fourteen numbered checks, one pass/fail line each.

Checks 1-9 and 13 are exact arithmetic or property suites and run in
seconds. Checks 10-12 are directional training results on the shared desk
lab (built once per session). Check 14 reruns a complete small pipeline
twice and compares every byte it writes.

Every check prints one line:

    [check NN] PASS|FAIL <measured values and pinned tolerances>

and then asserts, so a red check is visible both in the line and in the
pytest summary.
"""

from __future__ import annotations

import hashlib
import json
import struct
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import kdlab.autodiff as ad
from kdlab.autodiff import Tape
from kdlab.checkpoint import load_model, save_model
from kdlab.cli import main as cli_main
from kdlab.corpus import TokenChunk
from kdlab.distill import kd_loss_terms, validation_loss, weight_average
from kdlab.harness import (
    ParetoPoint,
    check_reference_budgets,
    check_reference_costs,
    family_cost_summary,
    pareto_front,
)
from kdlab.logitstore import (
    LogitBlock,
    generate_logit_shards,
    load_manifest,
    load_shard,
    stream_shards,
    write_shard,
)
from kdlab.logitstore import _record_dtype
from kdlab.model import (
    DESK_PRESETS,
    FAMILY_PRESETS,
    build_model,
    count_params,
    forward_batch,
)
from kdlab.quant import (
    calib_hessian,
    capture_calibration,
    column_norms,
    e4m3_decode,
    e4m3_decode_table,
    e4m3_encode,
    fake_quant,
    fuse_norms,
    gptq_quantize,
    parse_format,
    qad,
    quant_error_trace,
    quant_grid,
    quantize_model,
    rtn_quantize,
)
from kdlab.quant.formats import E2M1_VALUES, compute_aux
from kdlab.quant.qad import fake_quant_weights, ste_fake_quant

QAD_STEPS = 500          # recovery length at which averaging indifference holds
QAD_LR = 1e-4
INT3 = "int3g64"


def check(num: int, ok: bool, detail: str) -> None:
    line = f"[check {num:02d}] {'PASS' if ok else 'FAIL'} {detail}"
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


class timed:
    """Context manager capturing wall time for the runtime budget."""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        return False


# ---- 1: closed-form parameter counts ----


def test_01_parameter_counts_match_printed_sizes():
    printed = {
        "family-0.5b": 0.4e9,
        "family-1.5b": 1.5e9,
        "family-4b": 3.8e9,
        "family-8b": 8.1e9,
    }
    with timed() as t:
        rows = []
        ok = True
        for name, target in printed.items():
            total = count_params(FAMILY_PRESETS[name]).total
            rel = abs(total - target) / target
            rounds_to = round(total / 1e9, 1) == target / 1e9
            ok &= rel <= 0.05 or rounds_to
            rows.append(f"{name.split('-')[1]}={total / 1e9:.3f}e9({rel:.1%})")
    check(1, ok and t.elapsed < 1,
          f"{' '.join(rows)}; each within 5% or rounding to the printed "
          f"one-decimal size; {t.elapsed:.2f}s<1s")


# ---- 2: token-budget identity ----


def test_02_token_budgets_land_on_single_figure():
    with timed() as t:
        rows = check_reference_budgets()
        products = {r["tokens"] for r in rows}
        ok = (
            len(rows) == 3
            and all(r["rel_dev_from_median"] <= 0.01 for r in rows)
            and all(r["rounded_2sf"] == 1.7e12 for r in rows)
        )
    check(2, ok and t.elapsed < 1,
          f"batch*4096*iters = {sorted(products)} for all 3 schedules "
          f"(dev from median <= 1%, 2 s.f. = 1.7e12); {t.elapsed:.2f}s<1s")


# ---- 3: cost-model reproduction ----


def test_03_cost_rule_reproduces_reference_table():
    with timed() as t:
        rows = check_reference_costs()
        worst = max(r["rel_err"] for r in rows)
        frac = family_cost_summary()["fraction_of_target"]
        ok = len(rows) == 9 and worst <= 0.10 and frac < 0.12
    check(3, ok and t.elapsed < 1,
          f"9/9 rows by the 3NT/1NT rule, worst rel err {worst:.2%}<=10%; "
          f"family total {frac:.2%}<12% of 3.7e23; {t.elapsed:.2f}s<1s")


# ---- 4: sparse-record arithmetic and shard IO ----


def _random_blocks(rng, n_chunks, t, k, vocab):
    blocks = []
    for _ in range(n_chunks):
        toks = rng.integers(0, vocab, size=t).astype(np.int32)
        idx = np.stack([rng.choice(vocab, size=k, replace=False) for _ in range(t)])
        p = rng.random((t, k)).astype(np.float32)
        order = np.argsort(-p, axis=1)
        blocks.append(LogitBlock(
            TokenChunk(toks, (t // 2,)),
            np.take_along_axis(idx, order, axis=1).astype(np.uint32),
            np.take_along_axis(p, order, axis=1),
        ))
    return blocks


def test_04_record_size_round_trip_and_monotone_reads(tmp_path):
    with timed() as t:
        per_token = _record_dtype(256).itemsize
        ok = per_token == 2048

        rng = np.random.default_rng(0)
        blocks = _random_blocks(rng, n_chunks=3, t=8, k=256, vocab=300)
        crc = write_shard(tmp_path / "s.slog.gz", blocks, vocab=300)
        back = load_shard(tmp_path / "s.slog.gz", crc)
        rt = len(back) == len(blocks) and all(
            np.array_equal(a.chunk.tokens, b.chunk.tokens)
            and a.chunk.doc_boundaries == b.chunk.doc_boundaries
            and np.array_equal(a.indices, b.indices)
            and np.array_equal(a.probs, b.probs)
            for a, b in zip(blocks, back)
        )
        ok &= rt

        chunks = [TokenChunk(rng.integers(0, 257, size=16).astype(np.int32), ())
                  for _ in range(48)]
        generate_logit_shards(
            chunks,
            lambda toks, b: rng.standard_normal((toks.shape[0], toks.shape[1], 257)).astype(np.float32),
            tmp_path / "store", vocab=257, k=256,
            tokens_per_shard=16 * 12, perm_seed=3, batch_size=16,
        )
        trace: list = []
        for _ in stream_shards(tmp_path / "store", prefetch=False, trace=trace):
            pass
        per_file: dict[str, list[int]] = {}
        for name, offset, _ in trace:
            per_file.setdefault(name, []).append(offset)
        manifest = load_manifest(tmp_path / "store")
        monotone = (
            list(per_file) == [s["path"] for s in manifest["shards"]]
            and all(o == sorted(o) for o in per_file.values())
        )
        ok &= monotone
    check(4, ok and t.elapsed < 60,
          f"k=256 record = {per_token} bytes/token (= 2048); shard round trip "
          f"bit-exact: {rt}; one-epoch offsets monotone over "
          f"{len(manifest['shards'])} shards: {monotone}; {t.elapsed:.1f}s<60s")


# ---- 5: gradient correctness ----


PRIM_TOL = 1e-6


def _primitive_gradcheck_battery() -> float:
    rng = np.random.default_rng(0)

    def t64(*shape):
        return ad.parameter(rng.standard_normal(shape))

    a, b = t64(4, 5), t64(5, 3)
    x3, w = t64(2, 3, 5), t64(4, 5)
    c, d = t64(3, 4), t64(3, 4)
    xn, g = t64(2, 5, 8), t64(8)
    xr = t64(2, 6, 2, 8)
    q, k, v = t64(2, 4, 4, 6), t64(2, 4, 2, 6), t64(2, 4, 2, 6)
    mask = np.where(np.tril(np.ones((4, 4))) > 0, 0.0, -1e9)[None].repeat(2, axis=0)
    xs = t64(3, 7)
    table, xg = t64(11, 5), t64(3, 9)
    ids = rng.integers(0, 11, size=(2, 4))
    gidx = rng.integers(0, 9, size=(3, 2))
    xsh = t64(2, 8)
    xa = t64(4, 6)

    battery = [
        ("matmul", lambda: ad.tsum(ad.mul(ad.matmul(a, b), ad.matmul(a, b))), [a, b]),
        ("linear", lambda: ad.tsum(ad.mul(ad.linear(x3, w), ad.linear(x3, w))), [x3, w]),
        ("add/mul/scale", lambda: ad.tsum(
            ad.mul(ad.add(ad.mul(c, d), ad.scale(c, 0.7)),
                   ad.add_const(ad.add(ad.mul(c, d), ad.scale(c, 0.7)), 0.3))), [c, d]),
        ("rmsnorm", lambda: ad.tsum(ad.mul(ad.rmsnorm(xn, g), ad.rmsnorm(xn, g))), [xn, g]),
        ("rope", lambda: ad.tsum(ad.mul(ad.rope(xr), ad.rope(xr))), [xr]),
        ("attention", lambda: ad.tsum(ad.mul(ad.attention(q, k, v, mask),
                                             ad.attention(q, k, v, mask))), [q, k, v]),
        ("softmax", lambda: ad.tsum(ad.mul(ad.add(ad.softmax(xs), ad.log_softmax(xs)),
                                           ad.add(ad.softmax(xs), ad.log_softmax(xs)))), [xs]),
        ("embed/take", lambda: ad.add(
            ad.tsum(ad.mul(ad.embed(table, ids), ad.embed(table, ids))),
            ad.tsum(ad.mul(ad.take_along(xg, gidx), ad.take_along(xg, gidx)))), [table, xg]),
        ("slice/reshape", lambda: ad.tsum(
            ad.mul(ad.reshape(ad.slice_last(xsh, 1, 7), (2, 2, 3)),
                   ad.reshape(ad.slice_last(xsh, 1, 7), (2, 2, 3)))), [xsh]),
    ]
    battery += [
        (kind, (lambda kk: lambda: ad.tsum(ad.mul(ad.activation(xa, kk), xa)))(kind), [xa])
        for kind in ad.activation_names()
    ]
    return max(ad.gradcheck(fn, ps) for _, fn, ps in battery)


def test_05_gradients_match_central_differences():
    with timed() as t:
        prim_worst = _primitive_gradcheck_battery()

        params = build_model(DESK_PRESETS["desk-student-s"], seed=0).copy(dtype=np.float64)
        rng = np.random.default_rng(1)
        toks = rng.integers(0, 257, size=(1, 8))
        labels = np.roll(toks, -1, axis=1)
        valid = np.ones_like(toks, dtype=bool)
        valid[:, -1] = False
        idx = np.stack([rng.choice(257, size=4, replace=False) for _ in range(8)])[None]
        prb = rng.random((1, 8, 4)).astype(np.float32)
        prb /= prb.sum(-1, keepdims=True)

        def loss():
            logits = forward_batch(params, toks, [(4,)])
            return kd_loss_terms(logits, idx, prb, labels, valid, 0.9)[0]

        model_worst = ad.gradcheck(loss, params.trainable())
        n = sum(p.data.size for p in params.trainable())
        ok = prim_worst < PRIM_TOL and model_worst < 1e-4
    check(5, ok and t.elapsed < 120,
          f"primitives worst rel err {prim_worst:.2e}<1e-6; full desk model "
          f"({n} params, blended loss) worst {model_worst:.2e}<1e-4; "
          f"{t.elapsed:.1f}s<120s")


# ---- 6: norm fusion preserves the function ----


def test_06_fusion_function_preservation(desk_lab):
    with timed() as t:
        teacher = load_model(desk_lab.teacher_path).copy(dtype=np.float64)
        fused = fuse_norms(teacher)
        toks = np.stack([c.tokens for c in desk_lab.val_chunks[:16]])
        with Tape():
            a = forward_batch(teacher, toks, None).data
            b = forward_batch(fused, toks, None).data
        flat_a = a.reshape(-1, a.shape[-1])[:1000]
        flat_b = b.reshape(-1, b.shape[-1])[:1000]
        drift = float(np.max(np.abs(flat_a - flat_b)))
        argmax_same = bool((flat_a.argmax(-1) == flat_b.argmax(-1)).all())
        norm_dev = 0.0
        for blk in fused.blocks:
            for wt in (blk.wqkv, blk.wup):
                norms = column_norms(wt.data)
                norm_dev = max(norm_dev, float(np.max(np.abs(norms / norms.mean() - 1))))
        ok = drift < 1e-10 and argmax_same and norm_dev < 1e-6
    check(6, ok and t.elapsed < 60,
          f"max |logit delta| {drift:.2e}<1e-10 (float64) and argmax equal on "
          f"1000 probes: {argmax_same}; equalized column norms within "
          f"{norm_dev:.2e}<1e-6; {t.elapsed:.1f}s<60s")


# ---- 7: GPTQ degeneration and calibration advantage ----


def test_07_gptq_identity_and_calibrated_error(desk_lab):
    fmt = parse_format(INT3)
    with timed() as t:
        models = [load_model(desk_lab.teacher_path)]
        models += [
            load_model(desk_lab.run_dirs[("kd", s)] / "ckpt-000800.kdfc")
            for s in desk_lab.seeds
        ]
        identity_exact = True
        wins = 0
        total = 0
        for params in models:
            calib = capture_calibration(params, desk_lab.calib_chunks)
            for name in params.projection_names():
                w = params.tensor(name).data
                r = rtn_quantize(w, fmt)
                gi = gptq_quantize(w, np.eye(w.shape[1]), fmt)
                identity_exact &= np.array_equal(r.codes, gi.codes) and np.array_equal(
                    r.decode(), gi.decode()
                )
                h = calib_hessian(calib[name])
                g = gptq_quantize(w, h, fmt)
                wins += quant_error_trace(w, g.decode(), h) <= quant_error_trace(
                    w, r.decode(), h
                )
                total += 1
        frac = wins / total
        ok = identity_exact and frac >= 0.95
    check(7, ok and t.elapsed < 120,
          f"identity-Hessian == RTN bit-exact on {total} projections: "
          f"{identity_exact}; calibrated tr(EHE^T) <= RTN on {wins}/{total} "
          f"({frac:.0%}>=95%); {t.elapsed:.1f}s<120s")


# ---- 8: codec conformance ----


def _e4m3_oracle():
    vals = np.empty(256, dtype=np.float32)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        e, m = (code >> 3) & 0xF, code & 0x7
        if e == 15 and m == 7:
            vals[code] = np.nan
        elif e == 0:
            vals[code] = sign * m * 2.0**-9
        else:
            vals[code] = sign * (1 + m / 8.0) * 2.0 ** (e - 7)
    return vals


def test_08_codec_conformance():
    with timed() as t:
        # E4M3: decode table against the exhaustive bit-field oracle, and
        # encode as nearest finite value with saturation
        oracle = _e4m3_oracle()
        table = e4m3_decode_table()
        finite = ~np.isnan(oracle)
        e4m3_ok = (
            np.array_equal(np.isnan(table), ~finite)
            and np.array_equal(table[finite], oracle[finite])
        )
        rng = np.random.default_rng(0)
        fv = oracle[finite]
        xs = (rng.standard_normal(2000) * rng.choice([0.01, 1.0, 300.0], 2000)).astype(np.float32)
        dec = e4m3_decode(e4m3_encode(xs))
        for xv, dv in zip(xs, dec):
            tgt = np.clip(xv, -448.0, 448.0)
            e4m3_ok &= abs(dv - tgt) == np.min(np.abs(fv - tgt))

        # NVFP4 element grid: the 15-value enumeration
        grid = quant_grid(parse_format("nvfp4"))
        enum = np.array(sorted({s * v for v in E2M1_VALUES for s in (1.0, -1.0)}))
        nvfp4_ok = len(enum) == 15 and np.array_equal(grid, enum)

        # INT: brute-force nearest-grid oracle on 1e4 random values
        int_ok = True
        fmt = parse_format("int4g16")
        x = (rng.standard_normal((625, 16)) * rng.uniform(0.01, 10, (625, 1))).astype(np.float32)
        aux = compute_aux(x, fmt)
        y = fake_quant(x, fmt)
        scales = aux.group_scales()
        for r in range(x.shape[0]):
            qcodes = np.arange(16, dtype=np.float32)
            vals = (np.float32(aux.lo[r, 0]) + qcodes * np.float32(scales[r, 0])).astype(np.float32)
            vals[-1] = aux.hi[r, 0]
            d = np.abs(vals[None, :] - x[r][:, None])
            int_ok &= bool((np.abs(y[r] - x[r]) == d.min(axis=1)).all())

        # idempotence: second pass reproduces the first bit for bit
        idem_ok = True
        for fname in ("int4g64", "int4g32sym", "int3g16", "int2g16", "fp8", "nvfp4", "bf16"):
            f = parse_format(fname)
            for shape, scale in (((8, 64), 1.0), ((5, 48), 1e3), ((16, 16), 1e-3)):
                w = (rng.standard_normal(shape) * scale).astype(np.float32)
                once = fake_quant(w, f)
                idem_ok &= np.array_equal(fake_quant(once, f), once)

        ok = e4m3_ok and nvfp4_ok and int_ok and idem_ok
    check(8, ok and t.elapsed < 60,
          f"E4M3 256-code oracle + nearest encode: {e4m3_ok}; NVFP4 15-value "
          f"grid: {nvfp4_ok}; INT nearest-grid on 10^4 values: {int_ok}; "
          f"idempotence bit-exact over 7 formats: {idem_ok}; {t.elapsed:.1f}s<60s")


# ---- 9: straight-through estimator contract ----


def test_09_ste_gradient_contract():
    with timed() as t:
        fmt = parse_format("int4g16")
        rng = np.random.default_rng(0)
        w_np = rng.standard_normal((4, 16)).astype(np.float32)
        x_np = rng.standard_normal((5, 16)).astype(np.float32)

        w = ad.parameter(w_np.copy())
        with Tape() as tape:
            y = ad.linear(ad.tensor(x_np), ste_fake_quant(w, fmt))
            loss = ad.tsum(ad.mul(y, y))
        g_ste = ad.backward(tape, loss, [w])[w]

        wq = ad.parameter(fake_quant(w_np, fmt))
        with Tape() as tape2:
            y2 = ad.linear(ad.tensor(x_np), wq)
            loss2 = ad.tsum(ad.mul(y2, y2))
        g_ref = ad.backward(tape2, loss2, [wq])[wq]
        unclipped_exact = np.array_equal(g_ste, g_ref)

        sfmt = parse_format("int4g16sym")
        base = np.linspace(-1, 1, 32, dtype=np.float32).reshape(2, 16)
        aux = compute_aux(base, sfmt)
        moved = base.copy()
        moved[0, 0] = 50.0
        wm = ad.parameter(moved)
        with Tape() as tape3:
            loss3 = ad.tsum(ste_fake_quant(wm, sfmt, aux=aux))
        g = ad.backward(tape3, loss3, [wm])[wm]
        clipped_zero = g[0, 0] == 0.0 and bool((g.ravel()[1:] == 1.0).all())
        ok = unclipped_exact and clipped_zero
    check(9, ok and t.elapsed < 10,
          f"unclipped STE grad == full-precision grad at rounded weights "
          f"(exact): {unclipped_exact}; frozen-range clipped coordinate gets "
          f"zero: {clipped_zero}; {t.elapsed:.1f}s<10s")


# ---- 10-12: directional training results on the desk lab ----


def test_10_distillation_beats_cross_entropy(desk_lab):
    with timed() as t:
        wins = []
        pairs = []
        for seed in desk_lab.seeds:
            kd = desk_lab.student_val[("kd", seed)]
            ce = desk_lab.student_val[("ce", seed)]
            wins.append(kd < ce)
            pairs.append(f"s{seed}: {kd:.4f}<{ce:.4f}" if kd < ce else f"s{seed}: {kd:.4f}>={ce:.4f}")
        ok = sum(wins) >= 2
    check(10, ok and t.elapsed < 1200,
          f"blended-loss student beats pure-CE student on {sum(wins)}/3 seeds "
          f"(need >=2) at equal tokens [{'; '.join(pairs)}]; {t.elapsed:.1f}s<20min")


@pytest.fixture(scope="module")
def quant_gaps(desk_lab):
    """Validation-loss gaps at INT3 for rtn / gptq / recovery, last vs averaged."""
    fmt = parse_format(INT3)
    gaps: dict[int, dict[str, float]] = {}
    for seed in desk_lab.seeds:
        run = desk_lab.run_dirs[("kd", seed)]
        last = load_model(run / "ckpt-000800.kdfc")
        avg = weight_average(
            [load_model(run / f"ckpt-{i:06d}.kdfc") for i in (400, 600, 800)]
        )
        base_last = desk_lab.student_val[("kd", seed)]
        base_avg = validation_loss(avg, desk_lab.val_chunks)

        def vloss(params):
            return validation_loss(params, desk_lab.val_chunks)

        calib = capture_calibration(last, desk_lab.calib_chunks)
        hess = {name: calib_hessian(x) for name, x in calib.items()}

        def qad_gap(params, base):
            res = qad(params, fmt, desk_lab.store_dir, steps=QAD_STEPS, lr=QAD_LR,
                      global_batch=8, seed=seed)
            deliver = quantize_model(fake_quant_weights(res.params, fmt), fmt)
            return vloss(deliver.to_params()) - base

        gaps[seed] = {
            "rtn_last": vloss(quantize_model(last, fmt).to_params()) - base_last,
            "gptq_last": vloss(
                quantize_model(last, fmt, "gptq", hessians=hess).to_params()
            ) - base_last,
            "qad_last": qad_gap(last, base_last),
            "rtn_avg": vloss(quantize_model(avg, fmt).to_params()) - base_avg,
            "qad_avg": qad_gap(avg, base_avg),
        }
    return gaps


def test_11_quantization_method_ordering(desk_lab, quant_gaps):
    with timed() as t:
        wins = []
        rows = []
        for seed in desk_lab.seeds:
            g = quant_gaps[seed]
            wins.append(g["qad_last"] <= g["gptq_last"] <= g["rtn_last"])
            rows.append(
                f"s{seed}: {g['qad_last']:.3f}<={g['gptq_last']:.3f}<={g['rtn_last']:.3f}"
            )
        ok = sum(wins) >= 2
    check(11, ok and t.elapsed < 1200,
          f"INT3 gap ordering recovery<=gptq<=rtn on {sum(wins)}/3 seeds "
          f"(need >=2) [{'; '.join(rows)}]; {t.elapsed:.1f}s<20min")


def test_12_weight_averaging_helps_rtn_not_recovery(desk_lab, quant_gaps):
    with timed() as t:
        rtn_wins = [
            quant_gaps[s]["rtn_avg"] <= quant_gaps[s]["rtn_last"] for s in desk_lab.seeds
        ]
        diffs = np.array(
            [quant_gaps[s]["qad_avg"] - quant_gaps[s]["qad_last"] for s in desk_lab.seeds]
        )
        qad_last = np.array([quant_gaps[s]["qad_last"] for s in desk_lab.seeds])
        spread = float(np.std(qad_last, ddof=1))
        shift = float(abs(diffs.mean()))
        ok = sum(rtn_wins) >= 2 and shift < spread
    check(12, ok and t.elapsed < 1200,
          f"3-checkpoint average lowers the RTN gap on {sum(rtn_wins)}/3 seeds "
          f"(need >=2); recovery indifferent to averaging: |mean gap shift| "
          f"{shift:.4f} < seed-to-seed std {spread:.4f}; {t.elapsed:.1f}s<20min")


# ---- 13: Pareto extraction against the dominance definition ----


def test_13_pareto_brute_force_and_invariances():
    with timed() as t:
        rng = np.random.default_rng(0)
        costs = rng.integers(0, 10**6, 980).astype(float)
        quals = rng.integers(0, 10**6, 980).astype(float)
        points = [ParetoPoint(str(i), c, q) for i, (c, q) in enumerate(zip(costs, quals))]
        points += [ParetoPoint(f"dup{i}", points[i].cost, points[i].quality) for i in range(20)]
        assert len(points) == 1000

        def front_labels(pts):
            return {p.label for p in pareto_front(pts)}

        got = front_labels([ParetoPoint(p.label, p.cost, p.quality) for p in points])
        brute = set()
        for p in points:
            if not any(
                q.cost <= p.cost and q.quality >= p.quality
                and (q.cost < p.cost or q.quality > p.quality)
                for q in points if q is not p
            ):
                brute.add(p.label)
        matches = got == brute

        order = rng.permutation(len(points))
        perm = [ParetoPoint(points[i].label, points[i].cost, points[i].quality) for i in order]
        perm_ok = front_labels(perm) == brute
        scaled = [ParetoPoint(p.label, 3.0 * p.cost + 100.0, 2.0 * p.quality - 7.0)
                  for p in points]
        scale_ok = front_labels(scaled) == brute
        ok = matches and perm_ok and scale_ok
    check(13, ok and t.elapsed < 5,
          f"frontier == O(n^2) dominance oracle on 1000 points ({len(brute)} "
          f"survivors): {matches}; permutation-invariant: {perm_ok}; "
          f"monotone-rescaling-invariant: {scale_ok}; {t.elapsed:.1f}s<5s")


# ---- 14: end-to-end determinism ----


def _hash_tree(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix != ".png":
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def _run_pipeline(root: Path) -> dict[str, str]:
    root.mkdir(parents=True, exist_ok=True)
    corpus, chunks = root / "corpus", root / "chunks.kdch"
    store, run = root / "store", root / "run"

    def step(argv):
        assert cli_main([str(a) for a in argv]) == 0

    step(["synth-corpus", "--tokens", 120_000, "--seed", 5, "--out", corpus,
          "--task-fraction", 0.2])
    step(["pack", "--corpus", corpus, "--chunk-len", 64, "--out", chunks])
    save_model(build_model(DESK_PRESETS["desk-teacher"], seed=7), root / "teacher.kdfc")
    step(["teacher-gen", "--chunks", chunks, "--teacher", root / "teacher.kdfc",
          "--out", store, "--count", 400, "--k", 16,
          "--tokens-per-shard", 8192, "--batch-size", 32])
    step(["distill", "--student", "desk-student-s", "--store", store, "--out", run,
          "--iters", 150, "--global-batch", 8, "--checkpoint-interval", 75])
    ckpt = run / "ckpt-000150.kdfc"
    step(["quantize", "--model", ckpt, "--out", root / "rtn.kdqc", "--format", "int4g64"])
    step(["quantize", "--model", ckpt, "--out", root / "gptq.kdqc", "--format", "int4g64",
          "--method", "gptq", "--calib-chunks", chunks, "--calib-count", 16])
    spec = root / "grid.json"
    spec.write_text(json.dumps({
        "models": [{"label": "m", "checkpoint": str(ckpt)}],
        "formats": ["bf16", "int4g64"],
        "methods": ["rtn", "gptq"],
        "seeds": [0],
        "eval": {"val_manifest": str(store), "val_chunks": 32, "calib_chunks": 8,
                 "suite": ["copy"], "n_examples": 4},
    }))
    step(["report", "--spec", spec, "--out", root / "rep"])
    step(["pareto", "--report", root / "rep" / "report.csv",
          "--out", root / "frontier.csv"])
    hashes = _hash_tree(root)
    # paths inside the grid spec differ between the two roots by construction
    hashes.pop("grid.json")
    return hashes


def test_14_pipeline_rerun_is_bit_identical(tmp_path):
    with timed() as t:
        a = _run_pipeline(tmp_path / "runA")
        b = _run_pipeline(tmp_path / "runB")
        same_names = sorted(a) == sorted(b)
        diffs = [k for k in a if a.get(k) != b.get(k)]
        n_ckpt = sum(k.endswith((".kdfc", ".kdqc")) for k in a)
        ok = same_names and not diffs and n_ckpt >= 6
    check(14, ok and t.elapsed < 1800,
          f"pack -> teacher-gen -> distill -> quantize -> report rerun: "
          f"{len(a)} files compared ({n_ckpt} checkpoints), "
          f"{len(diffs)} differ {diffs[:4]}; {t.elapsed:.0f}s<30min")
