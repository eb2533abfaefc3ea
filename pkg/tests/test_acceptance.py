"""Acceptance criteria, one PASS/FAIL line each (also listed in the run summary).

Every check compares against an independent oracle or a hand-evaluated
number and asserts at the stated tolerance. Criterion 7 (task accuracy and
device latency) is out of scope and has no test.
"""

import itertools
import subprocess
import sys
import time

import numpy as np
import pytest

from bnnkit import container, costmodel, engine, models
from bnnkit.bitpack import pack
from bnnkit.costmodel import (
    SystolicConfig,
    area_report,
    cycles_network,
    energy_bounds,
    shape_search,
    t_conv_1to1,
    t_conv_1tob,
    t_eltwise,
    t_read,
    table1_rows,
    table2_rows,
)
from bnnkit.fusion import FusedBinaryConvUnit, fuse_unit
from bnnkit.graphs import build_resnet18, insert_after
from bnnkit.refmodel import ref_unit_forward

from conftest import ACCEPTANCE_LINES


def report(criterion: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pm1_conv(x, w, stride, pad):
    """Float +-1 cross-correlation with -1 padding; x NHWC, w N x K x K x C."""
    b, h, wd, c = x.shape
    k = w.shape[1]
    xp = np.full((b, h + 2 * pad, wd + 2 * pad, c), -1.0)
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    win = np.stack([xp[:, i * stride : i * stride + k, j * stride : j * stride + k]
                    for i in range(ho) for j in range(wo)], axis=1)  # B, HoWo, K, K, C
    out = np.tensordot(win, w.astype(np.float64), axes=([2, 3, 4], [1, 2, 3]))
    return out.reshape(b, ho, wo, -1)


def accum(x, w, stride):
    k, n = w.shape[1], w.shape[0]
    unit = FusedBinaryConvUnit(pack(w), "int4", stride, k // 2,
                               requant_scale=np.ones(n), requant_offset=np.zeros(n))
    return engine.binary_conv(pack(x), unit).values


# -- 1: fusion exactness -------------------------------------------------------------

UNITS_PER_CASE = 2500


def test_criterion1_fusion_exactness():
    rng = np.random.default_rng(20261019)
    start = time.perf_counter()
    units = elements = mismatches = 0
    for case in models.CASES:
        for i in range(UNITS_PER_CASE):
            dyadic = i % 2 == 0
            n, c = int(rng.integers(1, 5)), int(rng.integers(1, 9))
            k, stride = int(rng.choice([1, 3])), int(rng.choice([1, 2]))
            kappa_in = models._mag(rng, (), dyadic)
            unit = models.random_unit(rng, n, c, k, stride, case=case, dyadic=dyadic, kappa_in=kappa_in)
            x = models.random_signs(rng, (2, int(rng.integers(1, 6)), int(rng.integers(1, 6)), c))
            ref = ref_unit_forward(unit, x, kappa_in)
            got = engine.as_dense(engine.run_unit(pack(x), fuse_unit(unit, kappa_in)))
            mismatches += int(np.count_nonzero(got != ref))
            elements += ref.size
            units += 1
    elapsed = time.perf_counter() - start
    ok = units >= 10_000 and mismatches == 0 and elapsed < 120
    report("1", ok, f"{units} units over 4 sign cases, {mismatches} mismatches in {elements} elements, "
                    f"{elapsed:.1f} s (limit 120 s)")
    assert mismatches == 0
    assert units >= 10_000 and elapsed < 120


# -- 2: XNOR-popcount against float convolution ---------------------------------------


def all_patterns(count):
    return np.array(list(itertools.product([-1, 1], repeat=count)), np.int8)


def test_criterion2_xnor_popcount_oracle():
    rng = np.random.default_rng(2)
    bad = checked = 0
    # exhaustive: every weight pattern against 2 inputs, and every input pattern
    # (when c*h*w <= 16, else 4096 draws) against 4 weights
    for c, k, h, w, stride in itertools.product((1, 2), (1, 2, 3), range(1, 5), range(1, 5), (1, 2)):
        weights = all_patterns(c * k * k).reshape(-1, k, k, c)
        x = models.random_signs(rng, (2, h, w, c))
        y = accum(x, weights, stride)
        bad += int(np.count_nonzero(y != pm1_conv(x, weights, stride, k // 2)))
        checked += y.size
        n_in = c * h * w
        xs = all_patterns(n_in) if n_in <= 16 else models.random_signs(rng, (4096, n_in))
        x = xs.reshape(-1, h, w, c)
        weights = models.random_signs(rng, (4, k, k, c))
        y = accum(x, weights, stride)
        bad += int(np.count_nonzero(y != pm1_conv(x, weights, stride, k // 2)))
        checked += y.size
    exhaustive = checked
    for _ in range(300):
        c = int(rng.integers(1, 513))
        k, stride = int(rng.choice([1, 3])), int(rng.choice([1, 2]))
        x = models.random_signs(rng, (1, int(rng.integers(1, 6)), int(rng.integers(1, 6)), c))
        weights = models.random_signs(rng, (int(rng.integers(1, 9)), k, k, c))
        y = accum(x, weights, stride)
        bad += int(np.count_nonzero(y != pm1_conv(x, weights, stride, k // 2)))
        checked += y.size
    report("2", bad == 0, f"{bad} mismatches in {checked} accumulators "
                          f"({exhaustive} exhaustive small-shape, rest random up to C=512)")
    assert bad == 0


# -- 3: cycle-formula identities ---------------------------------------------------------


def test_criterion3_cycle_identities():
    rng = np.random.default_rng(3)
    eq_fail = elt_fail = 0
    for _ in range(1000):
        cfg = SystolicConfig(S=int(rng.choice([8, 16, 32, 64, 128])), P=int(rng.choice([256, 1024, 4096])),
                             M=int(rng.choice([32, 64, 128])))
        n, c = int(rng.integers(1, 1025)), int(rng.integers(1, 1025))
        k, w, h = int(rng.choice([1, 3, 5, 7])), int(rng.integers(1, 113)), int(rng.integers(1, 113))
        eq_fail += t_conv_1tob(cfg, n, c, k, w, h, 1) != t_conv_1to1(cfg, n, c, k, w, h)
        bits = int(rng.choice([1, 4, 8, 32]))
        elt_fail += t_eltwise(cfg, 1, w, h, c, bits) != 2 * t_read(cfg, 1, w, h, c, bits)
    deltas = []
    for kind in ("ResBlock", "BiReal", "BiNeal"):
        g = build_resnet18(kind, 1.0)
        base = cycles_network(g).total
        for target in [layer.name for layer in g.layers if layer.op in ("conv", "eltwise")][:12]:
            if g.layer(target).out_bits == 1:
                continue
            for op in ("bn", "scale"):
                deltas.append(cycles_network(insert_after(g, target, f"{target}.extra_{op}", op)).total - base)
    ok = eq_fail == 0 and elt_fail == 0 and all(d == 0 for d in deltas)
    report("3", ok, f"1->b conv at b=1 != 1->1 conv in {eq_fail}/1000, T(+) != 2 T(read) in {elt_fail}/1000, "
                    f"{len(deltas)} bn/scale insertions with max |delta| {max(map(abs, deltas))}")
    assert eq_fail == 0 and elt_fail == 0
    assert deltas and all(d == 0 for d in deltas)


# -- 4: area -----------------------------------------------------------------------------


def test_criterion4_area():
    rep = area_report()
    got = (rep.int8_pe, rep.int8_psum, rep.int8_total, rep.binary_pe, rep.binary_psum, rep.binary_total)
    want = (9472, 36800, 46272, 22631, 179200, 201831)
    published = {"pe": 2.4, "psum": 4.87, "total": 4.36}
    ratios = rep.to_dict()["ratios"]
    # compare at 1e-10 so that 2.39 vs 2.4 is not lost to binary rounding
    ratio_ok = all(round(abs(ratios[key] - published[key]), 10) <= 0.01 for key in published)
    lo, hi = energy_bounds(rep)
    ok = got == want and ratios == {"pe": 2.39, "psum": 4.87, "total": 4.36} and ratio_ok and (lo, hi) == (2.39, 4.36)
    report("4", ok, f"areas {got}, ratios {ratios['pe']}/{ratios['psum']}/{ratios['total']}, "
                    f"energy bounds ({lo}, {hi})")
    assert got == want
    assert ratio_ok and (lo, hi) == (2.39, 4.36)


# -- 5: block cycles ---------------------------------------------------------------------------

TABLE1_ROWS = {r.label: r for r in table1_rows()}


def test_criterion5_shape_search():
    res = shape_search()
    joint = ", ".join(f"stage {s}: {v:.3f}" for s, v in res["joint"].items())
    ok = res["best"] == costmodel.TABLE1_STAGE
    report("5 (shape)", ok, f"best joint stage {res['best']} ({joint})")
    assert ok


@pytest.mark.parametrize("label", list(TABLE1_ROWS))
def test_criterion5_table1_row(label):
    r = TABLE1_ROWS[label]
    detail = f"{label}: computed {r.computed / 1e3:.2f}K vs {r.published / 1e3:.1f}K ({r.rel_error:+.1%}, tol 10%)"
    if not r.ok:
        detail += "; breakdown " + ", ".join(f"{k}={v:.0f}" for k, v in r.breakdown.items())
    report("5", r.ok, detail)
    assert abs(r.rel_error) <= 0.10


# -- 6: network cycles -------------------------------------------------------------------------

TABLE2_CHECKED = ("ResNet-18 (8bit)", "Bi-Real", "BiNeal 0.5x", "BiNeal 1.0x", "BiNeal 1.5x", "BiNeal 2.0x")
TABLE2_ROWS = {r.label: r for r in table2_rows()}


@pytest.mark.parametrize("label", TABLE2_CHECKED)
def test_criterion6_table2_row(label):
    r = TABLE2_ROWS[label]
    detail = (f"{label}: computed {r.computed / 1e6:.3f}M vs {r.published / 1e6:.2f}M "
              f"({r.rel_error:+.1%}, tol {r.tolerance:.0%})")
    if not r.ok:
        detail += "; breakdown " + ", ".join(f"{k}={v:.0f}" for k, v in r.breakdown.items())
    report("6", r.ok, detail)
    assert abs(r.rel_error) <= (0.10 if label.startswith("ResNet") else 0.20)


# -- 8: determinism -----------------------------------------------------------------------------


def cli(*args):
    proc = subprocess.run([sys.executable, "-m", "bnnkit.cli", *args], capture_output=True, check=False)
    return proc.returncode, proc.stdout


def test_criterion8_determinism(tmp_path):
    train, fused, blob = tmp_path / "t.bnlm", tmp_path / "f.bnlm", tmp_path / "x.blob"
    assert cli("init-model", "--blocks", "3", "--channels", "40", "--hw", "7", "--stem", "--seed", "8",
               "--out", str(train))[0] == 0
    assert cli("fuse", "--in", str(train), "--out", str(fused), "--audit", str(tmp_path / "audit.txt"))[0] == 0
    g = container.load(fused).graph
    blob.write_bytes(engine.write_blob(np.random.default_rng(8).normal(size=g.input_shape)))
    runs, verifies = [], []
    for i, threads in enumerate(("1", "4", "1", "3")):
        out = tmp_path / f"y{i}.blob"
        code, _ = cli("run", "--model", str(fused), "--input", str(blob), "--out", str(out), "--threads", threads)
        assert code == 0
        runs.append(out.read_bytes())
        code, text = cli("verify", "--model", str(train), "--fused", str(fused), "--trials", "5",
                         "--threads", threads, "--json")
        verifies.append((code, text))
    ok = len(set(runs)) == 1 and len(set(verifies)) == 1 and verifies[0][0] == 0
    report("8", ok, f"run: {len(set(runs))} distinct output(s), verify: {len(set(verifies))} distinct output(s) "
                    f"over 4 processes with 1/4/1/3 threads")
    assert ok
