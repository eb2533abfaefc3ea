"""Command-line front end: ``bnnkit <command> ...``.

Exit codes: 0 success, 1 verification failure, 2 bad input (including
degenerate channels and malformed files).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import container, costmodel, engine, fusion, graphs, models, refmodel
from .errors import BNNError, DegenerateChannel

EXIT_OK, EXIT_MISMATCH, EXIT_INPUT = 0, 1, 2


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("BNNKIT_THREADS", "1"))


def _write(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        with open(path, "w") as fh:
            fh.write(text)


# -- model commands ---------------------------------------------------------


def cmd_build_graph(args) -> int:
    if args.net == "block":
        g = graphs.build_block(args.kind, args.cin, args.cout, args.stride, args.m, (args.hw, args.hw),
                               skip_kernel=args.skip_kernel)
    elif args.net == "resnet18":
        g = graphs.build_resnet18(args.kind, args.m, include_stem=not args.no_stem,
                                  include_classifier=not args.no_classifier, skip_kernel=args.skip_kernel)
    elif args.net == "edsr":
        g = graphs.build_edsr(args.kind, m=args.m)
    else:
        g = graphs.build_chain(args.blocks, args.cin, args.hw, args.m, args.skip_kernel, stem=args.stem)
    _write(args.out, graphs.to_json(g))
    return EXIT_OK


def cmd_init_model(args) -> int:
    if args.graph:
        with open(args.graph) as fh:
            g = graphs.from_json(fh.read())
    else:
        g = graphs.build_chain(args.blocks, args.channels, args.hw, args.m, args.skip_kernel, stem=args.stem)
    rng = np.random.default_rng(args.seed)
    tensors = models.init_training_tensors(g, rng, dyadic=args.dyadic)
    for name, role, value in args.set or ():
        tensors[f"{name}.{role}"][...] = float(value)
    container.save(args.out, container.ModelContainer("training", g, tensors))
    return EXIT_OK


def _audit(g, tensors) -> list[dict]:
    rows = []
    for layer in g.layers:
        if "theta" not in layer.params:
            continue
        theta = tensors[layer.params["theta"]]
        direction = tensors[layer.params["direction"]]
        theta_int = tensors[layer.params["theta_int"]] if "theta_int" in layer.params else [None] * len(theta)
        for ch, (t, ti, d) in enumerate(zip(theta, theta_int, direction)):
            rows.append({"layer": layer.name, "channel": ch, "theta": float(t),
                         "theta_int": None if ti is None else int(ti),
                         "direction": fusion.Direction(int(d)).name})
    return rows


def cmd_fuse(args) -> int:
    model = container.load(args.inp)
    if model.kind != "training":
        print(f"error: {args.inp} is a {model.kind} container", file=sys.stderr)
        return EXIT_INPUT
    fg, ft = fusion.fuse_graph(model.graph, model.tensors)
    container.save(args.out, container.ModelContainer("fused", fg, ft))
    rows = _audit(fg, ft)
    if args.json:
        text = json.dumps(rows, indent=1)
    else:
        lines = [f"{'layer':24s} {'ch':>4s} {'theta':>14s} {'theta_int':>10s} dir"]
        for r in rows:
            ti = "-" if r["theta_int"] is None else str(r["theta_int"])
            lines.append(f"{r['layer']:24s} {r['channel']:4d} {r['theta']:14.6g} {ti:>10s} {r['direction']}")
        text = "\n".join(lines)
    _write(args.audit, text)
    return EXIT_OK


def random_input(g, rng):
    if g.input_bits == 1:
        return models.random_signs(rng, g.input_shape)
    if g.input_bits == 4:
        return rng.integers(-8, 8, size=g.input_shape).astype(np.int8)
    return rng.normal(size=g.input_shape).astype(np.float32).astype(np.float64)


def verify(train: container.ModelContainer, fused: container.ModelContainer, trials: int, seed: int,
           threads: int = 1):
    """Compare reference and fused outputs on random inputs.

    Returns (mismatch count, element count, first mismatch or None).
    """
    rng = np.random.default_rng(seed)
    bad, total, first = 0, 0, None
    for trial in range(trials):
        x = random_input(train.graph, rng)
        ref = np.asarray(refmodel.ref_graph_forward(train.graph, train.tensors, x))
        got = engine.as_dense(engine.run_graph(fused.graph, fused.tensors, x, threads))
        diff = ref != got
        n = int(diff.sum())
        if n and first is None:
            idx = tuple(int(i) for i in np.argwhere(diff)[0])
            first = {"trial": trial, "index": idx, "reference": ref[idx].item(), "fused": got[idx].item()}
        bad += n
        total += ref.size
    return bad, total, first


def cmd_verify(args) -> int:
    train = container.load(args.model)
    if train.kind != "training":
        print(f"error: {args.model} is not a training container", file=sys.stderr)
        return EXIT_INPUT
    if args.fused:
        fused = container.load(args.fused)
    else:
        fg, ft = fusion.fuse_graph(train.graph, train.tensors)
        fused = container.ModelContainer("fused", fg, ft)
    bad, total, first = verify(train, fused, args.trials, args.seed, _threads(args))
    if args.json:
        print(json.dumps({"mismatches": bad, "elements": total, "trials": args.trials, "first": first}))
    else:
        print(f"{bad} mismatches in {total} elements over {args.trials} trials")
        if first:
            print(f"first mismatch: trial {first['trial']} index {first['index']} "
                  f"reference {first['reference']} fused {first['fused']}")
    return EXIT_OK if bad == 0 else EXIT_MISMATCH


def cmd_run(args) -> int:
    model = container.load(args.model)
    if model.kind != "fused":
        print(f"error: {args.model} is a {model.kind} container; fuse it first", file=sys.stderr)
        return EXIT_INPUT
    with open(args.input, "rb") as fh:
        x = engine.read_blob(fh.read())
    y = engine.run_graph(model.graph, model.tensors, x, _threads(args))
    with open(args.out, "wb") as fh:
        fh.write(engine.write_blob(y))
    return EXIT_OK


# -- cost model commands ----------------------------------------------------


def _arrays(path):
    if not path:
        return None
    with open(path) as fh:
        return costmodel.arrays_from_json(fh.read())


def cmd_cycles(args) -> int:
    with open(args.graph) as fh:
        g = graphs.from_json(fh.read())
    rep = costmodel.cycles_network(g, _arrays(args.array), args.charge_final_sign)
    _write(args.out, rep.to_csv() if args.format == "csv" else rep.to_json())
    return EXIT_OK


def cmd_area(args) -> int:
    arrays = _arrays(args.array) or {}
    rep = costmodel.area_report(int8_cfg=arrays.get("int8", costmodel.INT8_ARRAY),
                                binary_cfg=arrays.get("binary", costmodel.BINARY_ARRAY))
    d = rep.to_dict()
    d["energy_ratio_bounds"] = list(costmodel.energy_bounds(rep))
    if args.format == "json":
        _write(args.out, json.dumps(d, indent=2))
        return EXIT_OK
    lines = [f"{'':8s} {'PE':>10s} {'Psum':>10s} {'total':>10s}  (um^2)"]
    for arr in ("int8", "binary"):
        lines.append(f"{arr:8s} {d[arr]['pe']:10d} {d[arr]['psum']:10d} {d[arr]['total']:10d}")
    r = d["ratios"]
    lines.append(f"{'ratio':8s} {r['pe']:10.2f} {r['psum']:10.2f} {r['total']:10.2f}")
    lo, hi = d["energy_ratio_bounds"]
    lines.append(f"binary/8-bit energy ratio between {lo:.2f} and {hi:.2f}")
    _write(args.out, "\n".join(lines))
    return EXIT_OK


def cmd_repro(args) -> int:
    arrays = _arrays(args.array)
    if args.what == "shape-search":
        res = costmodel.shape_search(arrays, args.skip_kernel)
        if args.format == "json":
            _write(args.out, json.dumps(res, indent=2))
            return EXIT_OK
        lines = [f"{'row':32s} " + " ".join(f"{'stage ' + str(s):>9s}" for s in range(1, 5))]
        for label, cands in res["per_row"].items():
            cells = [f"{cands[s]:+9.1%}" if s in cands else f"{'-':>9s}" for s in range(1, 5)]
            lines.append(f"{label:32s} " + " ".join(cells))
        lines.append("joint mean |log ratio|: " + ", ".join(f"stage {s}: {v:.4f}" for s, v in res["joint"].items()))
        lines.append(f"best stage: {res['best']}")
        _write(args.out, "\n".join(lines))
        return EXIT_OK
    if args.what == "table1":
        rows = costmodel.table1_rows(args.stage, arrays, args.skip_kernel, args.charge_final_sign)
        unit, name = 1e3, "K"
    else:
        rows = costmodel.table2_rows(arrays, not args.no_stem, not args.no_classifier, args.skip_kernel,
                                     args.charge_final_sign)
        unit, name = 1e6, "M"
    if args.format == "json":
        _write(args.out, json.dumps([{"row": r.label, "published": r.published, "computed": r.computed,
                                      "rel_error": r.rel_error, "tolerance": r.tolerance, "ok": r.ok,
                                      "breakdown": r.breakdown} for r in rows], indent=2))
    else:
        _write(args.out, costmodel.format_rows(rows, unit, name))
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnnkit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-graph", help="write a GraphSpec as JSON")
    s.add_argument("net", choices=["block", "resnet18", "edsr", "chain"])
    s.add_argument("--kind", choices=graphs.BLOCK_KINDS, default="BiNeal")
    s.add_argument("--cin", type=int, default=256)
    s.add_argument("--cout", type=int, default=256)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--hw", type=int, default=14)
    s.add_argument("--m", type=float, default=1.0)
    s.add_argument("--blocks", type=int, default=2)
    s.add_argument("--skip-kernel", type=int, default=3)
    s.add_argument("--stem", action="store_true", help="chain: prepend an 8-bit conv + sign")
    s.add_argument("--no-stem", action="store_true")
    s.add_argument("--no-classifier", action="store_true")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("init-model", help="write a random training container")
    s.add_argument("--graph", help="GraphSpec JSON; default is a small BiNeal chain")
    s.add_argument("--blocks", type=int, default=2)
    s.add_argument("--channels", type=int, default=8)
    s.add_argument("--hw", type=int, default=6)
    s.add_argument("--m", type=float, default=1.0)
    s.add_argument("--skip-kernel", type=int, default=3)
    s.add_argument("--stem", action="store_true")
    s.add_argument("--dyadic", action="store_true", help="draw parameters from small binary fractions")
    s.add_argument("--set", nargs=3, action="append", metavar=("LAYER", "ROLE", "VALUE"),
                   help="overwrite a parameter tensor with a constant")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_model)

    s = sub.add_parser("fuse", help="compile a training container into a fused one")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--audit", default="-", help="where to write the per-channel threshold log")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("verify", help="check fused against reference outputs on random inputs")
    s.add_argument("--model", required=True)
    s.add_argument("--fused", help="check this fused container instead of fusing --model afresh")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("run", help="execute a fused container on a tensor blob")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("cycles", help="cycle report for a graph")
    s.add_argument("--graph", required=True)
    s.add_argument("--array", help="systolic array JSON")
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.add_argument("--charge-final-sign", action="store_true",
                   help="charge a read for sign nodes that follow an elementwise add")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_cycles)

    s = sub.add_parser("area", help="PE and Psum area of both arrays")
    s.add_argument("--array", help="systolic array JSON")
    s.add_argument("--format", choices=["text", "json"], default="text")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_area)

    s = sub.add_parser("repro", help="compare the cost model with published cycle counts")
    s.add_argument("what", choices=["table1", "table2-cycles", "shape-search"])
    s.add_argument("--array", help="systolic array JSON")
    s.add_argument("--stage", type=int, default=costmodel.TABLE1_STAGE, choices=[2, 3, 4])
    s.add_argument("--skip-kernel", type=int, default=3)
    s.add_argument("--no-stem", action="store_true")
    s.add_argument("--no-classifier", action="store_true")
    s.add_argument("--charge-final-sign", action="store_true")
    s.add_argument("--format", choices=["text", "json"], default="text")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DegenerateChannel as exc:
        print(f"error: degenerate channel: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (BNNError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
