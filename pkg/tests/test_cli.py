import json

import numpy as np
import pytest

from bnnkit import container, engine
from bnnkit.cli import main
from bnnkit.models import random_signs


@pytest.fixture
def models(tmp_path):
    train, fused = tmp_path / "train.bnlm", tmp_path / "fused.bnlm"
    assert main(["init-model", "--blocks", "2", "--channels", "8", "--hw", "5", "--stem", "--seed", "4",
                 "--out", str(train)]) == 0
    assert main(["fuse", "--in", str(train), "--out", str(fused), "--audit", str(tmp_path / "audit.txt")]) == 0
    return train, fused


def test_fuse_verify_roundtrip(models, capsys):
    train, fused = models
    capsys.readouterr()
    assert main(["verify", "--model", str(train), "--fused", str(fused), "--trials", "20"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("0 mismatches in ")


def test_audit_lists_every_channel(models, tmp_path):
    lines = (tmp_path / "audit.txt").read_text().splitlines()
    # stem.sign + 2 blocks x (conv1 + sign), 8 channels each
    assert len(lines) == 1 + 5 * 8
    assert lines[1].split()[0] == "stem.sign"


def test_fuse_json_audit(models, tmp_path, capsys):
    train, _ = models
    capsys.readouterr()
    assert main(["fuse", "--in", str(train), "--out", str(tmp_path / "f2.bnlm"), "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert {r["direction"] for r in rows} <= {"GE", "LE"}
    assert all(isinstance(r["theta_int"], int) for r in rows if r["layer"].endswith("conv1"))


def test_corrupted_threshold_is_caught(models, tmp_path, capsys):
    train, fused = models
    m = container.load(fused)
    name = m.graph.layer("block1.sign").params["direction"]
    m.tensors[name] = 1 - m.tensors[name]
    bad = tmp_path / "bad.bnlm"
    container.save(bad, m)
    capsys.readouterr()
    assert main(["verify", "--model", str(train), "--fused", str(bad), "--trials", "5", "--json"]) == 1
    res = json.loads(capsys.readouterr().out)
    assert res["mismatches"] > 0 and res["first"]["reference"] != res["first"]["fused"]


def test_zero_tau_is_input_error(tmp_path, capsys):
    train = tmp_path / "t.bnlm"
    assert main(["init-model", "--set", "block0.conv1", "tau", "0", "--out", str(train)]) == 0
    assert main(["fuse", "--in", str(train), "--out", str(tmp_path / "f.bnlm")]) == 2
    err = capsys.readouterr().err
    assert "degenerate channel" in err and "block0.conv1" in err


def test_fusing_a_fused_container_is_rejected(models, tmp_path):
    _, fused = models
    assert main(["fuse", "--in", str(fused), "--out", str(tmp_path / "x.bnlm")]) == 2


def test_missing_file_is_input_error(tmp_path):
    assert main(["verify", "--model", str(tmp_path / "nope.bnlm")]) == 2


def test_verify_output_is_reproducible(models, capsys):
    train, fused = models
    outs = []
    for threads in ("1", "3", "1"):
        capsys.readouterr()
        main(["verify", "--model", str(train), "--fused", str(fused), "--trials", "4", "--threads", threads,
              "--json"])
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1] == outs[2]


def test_run_is_deterministic_across_threads(models, tmp_path):
    _, fused = models
    m = container.load(fused)
    x = np.random.default_rng(0).normal(size=m.graph.input_shape)
    (tmp_path / "x.blob").write_bytes(engine.write_blob(x))
    outs = []
    for threads in ("1", "4", "1"):
        out = tmp_path / f"y{len(outs)}.blob"
        assert main(["run", "--model", str(fused), "--input", str(tmp_path / "x.blob"), "--out", str(out),
                     "--threads", threads]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]
    y = engine.read_blob(outs[0])
    assert y.shape == (1, 5, 5, 8)


def test_run_wrong_input_shape(models, tmp_path, capsys):
    _, fused = models
    (tmp_path / "x.blob").write_bytes(engine.write_blob(random_signs(np.random.default_rng(0), (1, 4, 4, 3))))
    assert main(["run", "--model", str(fused), "--input", str(tmp_path / "x.blob"),
                 "--out", str(tmp_path / "y.blob")]) == 2


def test_run_corrupt_blob(models, tmp_path):
    _, fused = models
    (tmp_path / "x.blob").write_bytes(b"\x00" * 10)
    assert main(["run", "--model", str(fused), "--input", str(tmp_path / "x.blob"),
                 "--out", str(tmp_path / "y.blob")]) == 2


def test_build_graph_then_cycles(tmp_path, capsys):
    g = tmp_path / "g.json"
    assert main(["build-graph", "block", "--out", str(g)]) == 0
    capsys.readouterr()
    assert main(["cycles", "--graph", str(g)]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "TOTAL,,,,32128"
    assert main(["cycles", "--graph", str(g), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["total"] == 32128


def test_cycles_with_custom_array(tmp_path, capsys):
    g, arr = tmp_path / "g.json", tmp_path / "a.json"
    main(["build-graph", "block", "--out", str(g)])
    arr.write_text('{"S": 64}')
    capsys.readouterr()
    assert main(["cycles", "--graph", str(g), "--array", str(arr), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["total"] > 32128


def test_malformed_array_exits_2(tmp_path):
    g, arr = tmp_path / "g.json", tmp_path / "a.json"
    main(["build-graph", "block", "--out", str(g)])
    arr.write_text('{"S": -1}')
    assert main(["cycles", "--graph", str(g), "--array", str(arr)]) == 2


def test_area_command(capsys):
    assert main(["area"]) == 0
    out = capsys.readouterr().out
    assert "46272" in out and "201831" in out and "2.39 and 4.36" in out
    assert main(["area", "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["binary"]["pe"] == 22631


def test_repro_commands(capsys):
    assert main(["repro", "table1"]) == 0
    out = capsys.readouterr().out
    assert "BiNeal w/o downsample" in out and "32.13K" in out
    assert main(["repro", "shape-search"]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "best stage: 3"
    assert main(["repro", "table2-cycles", "--format", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["ok"] and len(rows) == 9
