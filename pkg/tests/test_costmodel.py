import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnnkit.costmodel import (
    BINARY_ARRAY,
    INT8_ARRAY,
    SystolicConfig,
    area_report,
    arrays_from_json,
    cycles_block,
    cycles_network,
    energy_bounds,
    shape_search,
    stage_block,
    t_conv_1to1,
    t_conv_1tob,
    t_eltwise,
    t_read,
    t_requant,
    t_star,
    table1_rows,
    table2_rows,
)
from bnnkit.errors import InvalidParam, ParseError
from bnnkit.graphs import build_block, build_resnet18, insert_after

B1 = BINARY_ARRAY


@pytest.mark.parametrize("n, w, h, out", [(128, 32, 32, 128), (256, 64, 32, 512), (1, 1, 1, 128)])
def test_t_star_examples(n, w, h, out):
    assert t_star(B1, n, w, h) == out


@pytest.mark.parametrize("w, k, c, out", [(32, 3, 128, 9344), (7, 3, 512, 7568), (1, 1, 128, 129)])
def test_conv_1to1_examples(w, k, c, out):
    assert t_conv_1to1(B1, c, c, k, w, w) == out


@pytest.mark.parametrize("w, c, out", [(7, 512, 9332), (14, 256, 10840)])
def test_conv_1tob_examples(w, c, out):
    assert t_conv_1tob(B1, c, c, 3, w, w, 4) == out


@pytest.mark.parametrize("w, c, bits, out", [(56, 64, 1, 3136), (56, 256, 1, 6272), (14, 256, 4, 1568)])
def test_read_and_requant_examples(w, c, bits, out):
    assert t_read(B1, 1, w, w, c, bits) == out
    assert t_requant(B1, 1, w, w, c, bits) == out


@pytest.mark.parametrize("w, c, bits, out", [(14, 256, 4, 3136), (56, 64, 8, 50176)])
def test_eltwise_examples(w, c, bits, out):
    assert t_eltwise(B1, 1, w, w, c, bits) == out


def test_read_rejects_unknown_bits():
    with pytest.raises(InvalidParam):
        t_read(B1, 1, 4, 4, 8, bits=2)
    with pytest.raises(InvalidParam):
        t_conv_1tob(B1, 8, 8, 3, 4, 4, 0)


def test_read_fractional_is_exact_float():
    cfg = SystolicConfig(S=1, P=1024, M=3)
    assert t_read(cfg, 1, 1, 1, 1) == pytest.approx(1 / 3)


configs = st.builds(SystolicConfig, S=st.sampled_from([8, 16, 32, 128]), P=st.sampled_from([256, 1024]),
                    M=st.sampled_from([64, 128]))
dims = st.integers(1, 600)
hw = st.integers(1, 64)


@given(configs, dims, dims, st.sampled_from([1, 3, 5, 7]), hw, hw)
@settings(max_examples=1000)
def test_1tob_at_b1_is_1to1(cfg, n, c, k, w, h):
    assert t_conv_1tob(cfg, n, c, k, w, h, 1) == t_conv_1to1(cfg, n, c, k, w, h)


@given(configs, dims, dims, st.sampled_from([1, 3]), hw, st.integers(1, 7))
@settings(max_examples=200)
def test_1tob_monotone_in_depth(cfg, n, c, k, w, b):
    lo, hi = t_conv_1tob(cfg, n, c, k, w, w, b), t_conv_1tob(cfg, n, c, k, w, w, b + 1)
    assert hi - lo == w * w * k * math.ceil(n / cfg.S)


@given(configs, st.integers(1, 4), hw, hw, dims, st.sampled_from([1, 4, 8, 32]))
@settings(max_examples=200)
def test_eltwise_is_twice_read(cfg, b, w, h, c, bits):
    assert t_eltwise(cfg, b, w, h, c, bits) == 2 * t_read(cfg, b, w, h, c, bits)


@given(configs, dims, dims, hw)
@settings(max_examples=100)
def test_conv_monotone_in_channels(cfg, n, c, w):
    assert t_conv_1to1(cfg, n + cfg.S, c, 3, w, w) > t_conv_1to1(cfg, n, c, 3, w, w)
    assert t_conv_1to1(cfg, n, c + cfg.S, 3, w, w) > t_conv_1to1(cfg, n, c, 3, w, w)


# -- blocks and networks -------------------------------------------------------


def test_bineal_block_hand_sum():
    rep = cycles_block(stage_block("BiNeal", 3, False), B1)
    assert {e.name: e.cycles for e in rep.entries} == {
        "conv1": 7312, "conv2": 10840, "skip": 10840, "add": 3136, "sign": 0}
    assert rep.total == 32128 and rep.pipelined == ["sign"]


def test_bineal_downsample_block():
    # conv1: 196*3*3*2 + 256 = 3784; skip: 196*3*(3-1+4)*2 + 256 = 7312
    assert cycles_block(stage_block("BiNeal", 3, True), B1).total == 3784 + 10840 + 7312 + 3136


def test_resblock_on_int8_array():
    # conv: W*H*K = 588, ceil(C*K/S) = 48, ceil(N/S) = 16, T(*) = 256; add reads 8-bit maps
    rep = cycles_block(stage_block("ResBlock", 3, False), int8_cfg=INT8_ARRAY)
    assert rep.total == 2 * (588 * 48 * 16 + 256) + 2 * 3136
    assert set(rep.pipelined) == {"bn1", "relu1", "bn2", "relu2"}


def test_final_sign_flag_charges_read():
    g = stage_block("BiNeal", 3, False)
    assert cycles_network(g, charge_final_sign=True).total == 32128 + 1568


def test_report_total_is_sum_of_entries():
    rep = cycles_network(build_resnet18("BiNeal", 1.0))
    assert rep.total == sum(e.cycles for e in rep.entries)
    assert sum(rep.by_formula().values()) == rep.total
    assert rep.to_csv().splitlines()[-1] == f"TOTAL,,,,{rep.total}"
    assert json.loads(rep.to_json())["total"] == rep.total


INPLACE_SITES = [(op, after) for op in ("bn", "scale", "relu", "prelu") for after in ("conv1", "conv2", "add")
                 if not (after == "conv1" and op in ("relu", "prelu"))]  # no relu on a 1-bit map


@pytest.mark.parametrize("op, after", INPLACE_SITES)
def test_inserting_inplace_ops_is_free(op, after):
    g = build_block("BiNeal", 64, 64, hw=(14, 14))
    g2 = insert_after(g, after, "extra", op)
    assert cycles_network(g2).total == cycles_network(g).total


def test_inserting_bn_into_resnet_is_free():
    g = build_resnet18("ResBlock")
    g2 = insert_after(insert_after(g, "layer2.0.conv1", "x.bn", "bn"), "layer3.1.add", "x.scale", "scale")
    assert cycles_network(g2).total == cycles_network(g).total


def test_table1_passing_rows():
    rows = {r.label: r for r in table1_rows()}
    for label in ("ResBlock w/o downsample", "BiNeal w/o downsample",
                  "ResBlock with downsample", "BiNeal with downsample"):
        assert rows[label].ok, label


def test_shape_search_prefers_stage3():
    res = shape_search()
    assert res["best"] == 3
    assert res["ranking"][0] == 3 and set(res["ranking"]) == {2, 3, 4}


def test_table2_resnet_row():
    rows = table2_rows()
    assert rows[0].label.startswith("ResNet-18") and rows[0].ok
    assert sum(rows[0].breakdown.values()) == rows[0].computed


# -- area ------------------------------------------------------------------------


def test_area_values():
    rep = area_report()
    assert (rep.int8_pe, rep.int8_psum, rep.int8_total) == (9472, 36800, 46272)
    assert (rep.binary_pe, rep.binary_psum, rep.binary_total) == (22631, 179200, 201831)
    assert rep.binary_pe_exact == pytest.approx(22630.4)
    assert rep.to_dict()["ratios"] == {"pe": 2.39, "psum": 4.87, "total": 4.36}


def test_energy_bounds():
    lo, hi = energy_bounds()
    assert (lo, hi) == (2.39, 4.36) and lo <= hi


def test_area_rejects_unknown_psum_width():
    with pytest.raises(InvalidParam):
        area_report(binary_cfg=SystolicConfig(psum_bits=24))


# -- config files ----------------------------------------------------------------


def test_arrays_from_json_forms():
    assert arrays_from_json('{"S": 64}')["binary"].S == 64
    both = arrays_from_json('{"binary": {"P": 512}, "int8": {"S": 32}}')
    assert both["binary"].P == 512 and both["int8"].S == 32 and both["int8"].psum_bits == 32


@pytest.mark.parametrize("text", ['{"S": 0}', '{"S": "big"}', '{"Q": 1}', "[1, 2]", "{oops", '{"binary": 3}'])
def test_malformed_array_json(text):
    with pytest.raises(ParseError):
        arrays_from_json(text)
