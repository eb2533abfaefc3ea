"""Closed-form cycle and area estimates for a weight-stationary systolic array.

Two arrays share one input bandwidth M: a 1-bit array of S=128 PEs per side
and the 8-bit array it was derived from (S=16). Convolutions cost

    T(*)          = ceil(N/S) * ceil(W*H/P) * S
    T(conv 1->1)  = W*H*K * ceil(C*K/S) * ceil(N/S) + T(*)
    T(conv 1->b)  = W*H*K * (ceil(C*K/S) - 1 + b) * ceil(N/S) + T(*)

with W, H the *output* size. Moving a feature map costs
T(read) = B*W*H * ceil(C/S) * S / M, scaled linearly by the data's bit-depth;
a two-input elementwise op costs 2 * T(read) (its write is pipelined), and a
bit-depth conversion costs one T(read) of its input. In-place ops that keep
the bit-depth (BN, scale, ReLU, PReLU) are free.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

from .errors import InvalidParam, ParseError
from .graphs import PIPELINED_OPS, GraphSpec, Layer, build_block, build_resnet18, scaled, RESNET18_STAGES

READ_BITS = (1, 4, 8, 32)


@dataclass(frozen=True)
class SystolicConfig:
    S: int = 128
    P: int = 1024
    M: int = 128
    psum_bits: int = 16
    pe_bits: int = 1

    def __post_init__(self):
        for name in ("S", "P", "M", "psum_bits", "pe_bits"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
                raise InvalidParam(f"{name} must be a positive integer, got {v!r}")


BINARY_ARRAY = SystolicConfig(S=128, P=1024, M=128, psum_bits=16, pe_bits=1)
INT8_ARRAY = SystolicConfig(S=16, P=1024, M=128, psum_bits=32, pe_bits=8)


def default_arrays() -> dict[str, SystolicConfig]:
    return {"binary": BINARY_ARRAY, "int8": INT8_ARRAY}


def _cdiv(a: int, b: int) -> int:
    return -(-a // b)


def _exact(num: int, den: int):
    return num // den if num % den == 0 else num / den


def t_star(cfg: SystolicConfig, N, W, H) -> int:
    return _cdiv(N, cfg.S) * _cdiv(W * H, cfg.P) * cfg.S


def t_conv_1to1(cfg: SystolicConfig, N, C, K, W, H) -> int:
    return W * H * K * _cdiv(C * K, cfg.S) * _cdiv(N, cfg.S) + t_star(cfg, N, W, H)


def t_conv_1tob(cfg: SystolicConfig, N, C, K, W, H, b) -> int:
    if b < 1:
        raise InvalidParam("output bit-depth must be >= 1")
    return W * H * K * (_cdiv(C * K, cfg.S) - 1 + b) * _cdiv(N, cfg.S) + t_star(cfg, N, W, H)


def t_read(cfg: SystolicConfig, B, W, H, C, bits=1):
    if bits not in READ_BITS:
        raise InvalidParam(f"bits must be one of {READ_BITS}")
    return _exact(B * W * H * _cdiv(C, cfg.S) * cfg.S * bits, cfg.M)


def t_eltwise(cfg: SystolicConfig, B, W, H, C, bits=1):
    return 2 * t_read(cfg, B, W, H, C, bits)


def t_requant(cfg: SystolicConfig, B, W, H, C, bits=1):
    return t_read(cfg, B, W, H, C, bits)


@dataclass
class CycleEntry:
    name: str
    op: str
    array: str
    formula: str
    cycles: float


@dataclass
class CycleReport:
    name: str
    entries: list[CycleEntry] = field(default_factory=list)

    @property
    def total(self):
        return sum(e.cycles for e in self.entries)

    @property
    def pipelined(self) -> list[str]:
        return [e.name for e in self.entries if e.formula == "pipelined"]

    def by_formula(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.formula] = out.get(e.formula, 0) + e.cycles
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "total": self.total, "pipelined": self.pipelined,
                "entries": [asdict(e) for e in self.entries]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "op", "array", "formula", "cycles"])
        for e in self.entries:
            w.writerow([e.name, e.op, e.array, e.formula, e.cycles])
        w.writerow(["TOTAL", "", "", "", self.total])
        return buf.getvalue()


def layer_cycles(g: GraphSpec, layer: Layer, arrays, charge_final_sign=False) -> CycleEntry:
    arr = layer.resolved_array()
    cfg = arrays[arr]
    b, h, w, c = g.in_shape(layer)
    if layer.op == "conv":
        depth = max(1, layer.out_bits // layer.in_bits)
        if depth == 1:
            cyc, formula = t_conv_1to1(cfg, layer.N, layer.C, layer.K, layer.W_out, layer.H_out), "conv_1to1"
        else:
            cyc = t_conv_1tob(cfg, layer.N, layer.C, layer.K, layer.W_out, layer.H_out, depth)
            formula = f"conv_1to{depth}"
        return CycleEntry(layer.name, layer.op, arr, formula, cyc * layer.B)
    if layer.op == "eltwise":
        return CycleEntry(layer.name, layer.op, arr, "eltwise", t_eltwise(cfg, b, w, h, c, layer.in_bits))
    if layer.op in PIPELINED_OPS and layer.in_bits == layer.out_bits:
        return CycleEntry(layer.name, layer.op, arr, "pipelined", 0)
    if layer.op in ("sign", "requant") and layer.attrs.get("follows_eltwise") and not charge_final_sign:
        return CycleEntry(layer.name, layer.op, arr, "pipelined", 0)
    # pool, sign, requant and any bit-depth-changing in-place op: one pass over the input
    return CycleEntry(layer.name, layer.op, arr, "read", t_read(cfg, b, w, h, c, layer.in_bits))


def cycles_network(g: GraphSpec, arrays=None, charge_final_sign=False) -> CycleReport:
    """Cost every layer of ``g``. ``arrays`` maps 'binary'/'int8' to configs."""
    arrays = {**default_arrays(), **(arrays or {})}
    report = CycleReport(g.name)
    for layer in g.layers:
        report.entries.append(layer_cycles(g, layer, arrays, charge_final_sign))
    return report


def cycles_block(fragment: GraphSpec, cfg: SystolicConfig | None = None, int8_cfg=None,
                 charge_final_sign=False) -> CycleReport:
    arrays = {}
    if cfg is not None:
        arrays["binary"] = cfg
    if int8_cfg is not None:
        arrays["int8"] = int8_cfg
    return cycles_network(fragment, arrays, charge_final_sign)


# -- area / energy ----------------------------------------------------------


@dataclass(frozen=True)
class CellConstants:
    """Cell areas in um^2; Psum macros are 1024 entries deep."""

    multiplier: float = 23.0
    adder: float = 14.0
    xnor: float = 0.6
    popcount: float = 100.0
    psum_1024x32: float = 2300.0
    psum_1024x16: float = 1400.0


@dataclass
class AreaReport:
    int8_pe: int
    int8_psum: int
    binary_pe: int
    binary_psum: int
    binary_pe_exact: float

    @property
    def int8_total(self) -> int:
        return self.int8_pe + self.int8_psum

    @property
    def binary_total(self) -> int:
        return self.binary_pe + self.binary_psum

    @property
    def ratios(self) -> dict[str, float]:
        return {
            "pe": self.binary_pe / self.int8_pe,
            "psum": self.binary_psum / self.int8_psum,
            "total": self.binary_total / self.int8_total,
        }

    def to_dict(self) -> dict:
        return {
            "int8": {"pe": self.int8_pe, "psum": self.int8_psum, "total": self.int8_total},
            "binary": {"pe": self.binary_pe, "psum": self.binary_psum, "total": self.binary_total,
                       "pe_unrounded": self.binary_pe_exact},
            "ratios": {k: round(v, 2) for k, v in self.ratios.items()},
        }


def _psum_macro(cells: CellConstants, cfg: SystolicConfig) -> float:
    per_1024 = {32: cells.psum_1024x32, 16: cells.psum_1024x16}
    if cfg.psum_bits not in per_1024:
        raise InvalidParam("area constants exist only for 16- and 32-bit Psum memories")
    return per_1024[cfg.psum_bits] * cfg.P / 1024


def area_report(cells: CellConstants = CellConstants(), int8_cfg: SystolicConfig = INT8_ARRAY,
                binary_cfg: SystolicConfig = BINARY_ARRAY) -> AreaReport:
    """Lower-bound array areas: PE logic plus one Psum memory per column.

    Areas are whole um^2, fractional sums rounded up (22630.4 -> 22631).
    """
    s8, s1 = int8_cfg.S, binary_cfg.S
    pe8 = (cells.multiplier + cells.adder) * s8 * s8
    pe1 = cells.xnor * s1 * s1 + cells.popcount * s1
    return AreaReport(
        int8_pe=math.ceil(round(pe8, 6)),
        int8_psum=math.ceil(round(_psum_macro(cells, int8_cfg) * s8, 6)),
        binary_pe=math.ceil(round(pe1, 6)),
        binary_psum=math.ceil(round(_psum_macro(cells, binary_cfg) * s1, 6)),
        binary_pe_exact=pe1,
    )


def energy_bounds(report: AreaReport | None = None) -> tuple[float, float]:
    """Binary/8-bit power ratio interval: PE-area ratio to total-area ratio.

    Convolution power tracks PE area, so the lower end is the likelier value.
    """
    report = report or area_report()
    r = report.ratios
    lo, hi = round(r["pe"], 2), round(r["total"], 2)
    return (min(lo, hi), max(lo, hi))


# -- published targets -------------------------------------------------------

TABLE1 = (
    # label, block kind, downsample, cycles
    ("ResBlock w/o downsample", "ResBlock", False, 916.0e3),
    ("Bi-Real w/o downsample", "BiReal", False, 63.0e3),
    ("BiNeal w/o downsample", "BiNeal", False, 32.5e3),
    ("ResBlock with downsample", "ResBlock", True, 715.4e3),
    ("Bi-Real with downsample", "BiReal", True, 103.9e3),
    ("BiNeal with downsample", "BiNeal", True, 26.3e3),
)

TABLE2 = (
    # label, block kind, multiplier, cycles
    ("ResNet-18 (8bit)", "ResBlock", 1.0, 7.47e6),
    ("Bi-Real", "BiReal", 1.0, 1.65e6),
    ("BiNeal 0.5x", "BiNeal", 0.5, 0.74e6),
    ("BiNeal 0.75x", "BiNeal", 0.75, 0.80e6),
    ("BiNeal 1.0x", "BiNeal", 1.0, 0.84e6),
    ("BiNeal 1.25x", "BiNeal", 1.25, 1.00e6),
    ("BiNeal 1.5x", "BiNeal", 1.5, 1.06e6),
    ("BiNeal 1.75x", "BiNeal", 1.75, 1.17e6),
    ("BiNeal 2.0x", "BiNeal", 2.0, 1.25e6),
)

# ResNet-18 stage 3: 14x14x256 blocks, entered from 28x28x128
TABLE1_STAGE = 3
RESNET18_HW = (56, 28, 14, 7)


def stage_block(kind, stage, downsample, m=1.0, skip_kernel=3) -> GraphSpec:
    """The block of ResNet-18 ``stage`` (1-4); a downsample block enters the stage."""
    width = RESNET18_STAGES[stage - 1][0]
    if downsample:
        if stage < 2:
            raise InvalidParam("stage 1 has no downsample block")
        prev = RESNET18_STAGES[stage - 2][0]
        return build_block(kind, prev, width, 2, m, hw=(RESNET18_HW[stage - 2],) * 2, skip_kernel=skip_kernel)
    return build_block(kind, width, width, 1, m, hw=(RESNET18_HW[stage - 1],) * 2, skip_kernel=skip_kernel)


@dataclass
class ReproRow:
    label: str
    published: float
    computed: float
    tolerance: float
    breakdown: dict = field(default_factory=dict)

    @property
    def rel_error(self) -> float:
        return self.computed / self.published - 1.0

    @property
    def ok(self) -> bool:
        return abs(self.rel_error) <= self.tolerance


def table1_rows(stage=TABLE1_STAGE, arrays=None, skip_kernel=3, charge_final_sign=False,
                tolerance=0.10) -> list[ReproRow]:
    rows = []
    for label, kind, ds, published in TABLE1:
        rep = cycles_network(stage_block(kind, stage, ds, skip_kernel=skip_kernel), arrays, charge_final_sign)
        rows.append(ReproRow(label, published, rep.total, tolerance,
                             {e.name: e.cycles for e in rep.entries if e.cycles}))
    return rows


def table2_rows(arrays=None, include_stem=True, include_classifier=True, skip_kernel=3,
                charge_final_sign=False) -> list[ReproRow]:
    rows = []
    for label, kind, m, published in TABLE2:
        g = build_resnet18(kind, m, include_stem=include_stem, include_classifier=include_classifier,
                           skip_kernel=skip_kernel)
        rep = cycles_network(g, arrays, charge_final_sign)
        tol = 0.10 if kind == "ResBlock" else 0.20
        parts = {"stem": 0, "blocks": 0, "head": 0}
        for e in rep.entries:
            parts["stem" if e.name.startswith("stem") else "head" if e.name.startswith("head") else "blocks"] += e.cycles
        rows.append(ReproRow(label, published, rep.total, tol, parts))
    return rows


def shape_search(arrays=None, skip_kernel=3) -> dict:
    """Score every ResNet-18 stage shape against the published block cycles.

    Returns per-row candidate errors and a joint ranking of stages 2-4 (the
    stages that have both a plain and a downsample block), scored by the mean
    absolute log-ratio over all six rows.
    """
    per_row = {}
    for label, kind, ds, published in TABLE1:
        cands = {}
        for stage in range(2 if ds else 1, 5):
            total = cycles_network(stage_block(kind, stage, ds, skip_kernel=skip_kernel), arrays).total
            cands[stage] = total / published - 1.0
        per_row[label] = cands
    joint = {}
    for stage in (2, 3, 4):
        joint[stage] = sum(abs(math.log1p(per_row[label][stage])) for label, *_ in TABLE1) / len(TABLE1)
    ranking = sorted(joint, key=joint.get)
    return {"per_row": per_row, "joint": joint, "ranking": ranking, "best": ranking[0]}


def format_rows(rows: list[ReproRow], unit: float, unit_name: str) -> str:
    lines = [f"{'row':32s} {'published':>10s} {'computed':>10s} {'rel.err':>8s}  status"]
    for r in rows:
        status = "PASS" if r.ok else f"OUT OF TOLERANCE (+-{r.tolerance:.0%})"
        lines.append(f"{r.label:32s} {r.published / unit:9.2f}{unit_name} {r.computed / unit:9.2f}{unit_name} "
                     f"{r.rel_error:+8.2%}  {status}")
        if not r.ok:
            for k, v in r.breakdown.items():
                lines.append(f"    {k:28s} {v:12.0f}")
    return "\n".join(lines)


# -- array config files -----------------------------------------------------


def config_from_dict(d, loc="$") -> SystolicConfig:
    if not isinstance(d, dict):
        raise ParseError("array config must be an object", loc)
    unknown = set(d) - {"S", "P", "M", "psum_bits", "pe_bits"}
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}", loc)
    try:
        return SystolicConfig(**d)
    except InvalidParam as exc:
        raise ParseError(str(exc), loc) from exc


def arrays_from_json(text: str) -> dict[str, SystolicConfig]:
    """Parse either one binary-array config or {"binary": {...}, "int8": {...}}."""
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", f"line {exc.lineno} col {exc.colno}") from exc
    if not isinstance(d, dict):
        raise ParseError("array file must hold an object", "$")
    if set(d) <= {"binary", "int8"} and d:
        base = {"binary": asdict(BINARY_ARRAY), "int8": asdict(INT8_ARRAY)}
        return {k: config_from_dict({**base[k], **v} if isinstance(v, dict) else v, f"$.{k}")
                for k, v in d.items()}
    return {"binary": config_from_dict({**asdict(BINARY_ARRAY), **d})}


__all__ = [
    "SystolicConfig", "BINARY_ARRAY", "INT8_ARRAY", "t_star", "t_conv_1to1", "t_conv_1tob",
    "t_read", "t_eltwise", "t_requant", "CycleEntry", "CycleReport", "cycles_block",
    "cycles_network", "CellConstants", "AreaReport", "area_report", "energy_bounds",
    "TABLE1", "TABLE2", "table1_rows", "table2_rows", "shape_search", "stage_block", "scaled",
]
