"""Layer graphs with shapes and bit-depths, plus builders for ResNet-style nets.

A :class:`GraphSpec` is the single description consumed by the cost model
and, once parameter tensors are attached (``Layer.params`` maps a role such
as ``"weight"`` to a tensor name), by the reference forward pass and the
packed engine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

from .errors import GraphError, InvalidParam, ParseError

SCHEMA = "bnnkit.graph"
SCHEMA_VERSION = 1
INPUT = "input"

OPS = ("conv", "eltwise", "sign", "requant", "bn", "scale", "relu", "prelu", "pool")
PIPELINED_OPS = ("bn", "scale", "relu", "prelu")
BLOCK_KINDS = ("ResBlock", "BiReal", "BiNeal")
ARRAYS = ("binary", "int8")
BITS = (1, 4, 8, 32)


@dataclass
class Layer:
    name: str
    op: str
    N: int
    C: int
    H_out: int
    W_out: int
    K: int = 1
    stride: int = 1
    in_bits: int = 1
    out_bits: int = 1
    B: int = 1
    array: str | None = None
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def resolved_array(self) -> str:
        """Which systolic array runs this layer when not pinned explicitly."""
        if self.array is not None:
            return self.array
        if self.op == "conv":
            return "binary" if self.in_bits == 1 else "int8"
        return "binary" if self.in_bits <= 4 else "int8"

    @property
    def padding(self) -> int:
        return self.K // 2


@dataclass
class GraphSpec:
    name: str
    input_shape: tuple[int, int, int, int]  # B, H, W, C
    input_bits: int
    layers: list[Layer] = field(default_factory=list)
    edges: list[tuple[str, str]] = field(default_factory=list)
    multiplier: float = 1.0
    metadata: dict = field(default_factory=dict)

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise GraphError(f"no layer named {name!r}")

    def producers(self, name: str) -> list[str]:
        return [src for src, dst in self.edges if dst == name]

    def consumers(self, name: str) -> list[str]:
        return [dst for src, dst in self.edges if src == name]

    def outputs(self) -> list[str]:
        """Layers nobody consumes; the last one is the graph output."""
        used = {src for src, _ in self.edges}
        return [layer.name for layer in self.layers if layer.name not in used]

    def out_shape(self, name: str) -> tuple[int, int, int, int]:
        if name == INPUT:
            return tuple(self.input_shape)
        layer = self.layer(name)
        return (layer.B, layer.H_out, layer.W_out, layer.N)

    def out_bits(self, name: str) -> int:
        return self.input_bits if name == INPUT else self.layer(name).out_bits

    def in_shape(self, layer: Layer) -> tuple[int, int, int, int]:
        prods = self.producers(layer.name)
        if not prods:
            raise GraphError(f"layer {layer.name!r} has no producer")
        return self.out_shape(prods[0])

    def add(self, layer: Layer, inputs: Iterable[str]) -> Layer:
        self.layers.append(layer)
        self.edges.extend((src, layer.name) for src in inputs)
        return layer

    def validate(self) -> "GraphSpec":
        validate(self)
        return self


def topological_order(g: GraphSpec) -> list[Layer]:
    """Kahn order over ``g.edges``; raises GraphError on cycles or dangling edges."""
    by_name = {layer.name: layer for layer in g.layers}
    if len(by_name) != len(g.layers):
        raise GraphError("duplicate layer names")
    indeg = {name: 0 for name in by_name}
    for src, dst in g.edges:
        if dst not in by_name or (src != INPUT and src not in by_name):
            raise GraphError(f"edge {src!r} -> {dst!r} references an unknown layer")
        indeg[dst] += 1
    ready = [n for n in by_name if indeg[n] == 0 and not g.producers(n)]
    for src, dst in g.edges:
        if src == INPUT:
            indeg[dst] -= 1
            if indeg[dst] == 0:
                ready.append(dst)
    order = []
    while ready:
        # keep the declared order among ready nodes so results are stable
        ready.sort(key=lambda n: g.layers.index(by_name[n]))
        name = ready.pop(0)
        order.append(by_name[name])
        for src, dst in g.edges:
            if src == name:
                indeg[dst] -= 1
                if indeg[dst] == 0:
                    ready.append(dst)
    if len(order) != len(g.layers):
        stuck = sorted(set(by_name) - {layer.name for layer in order})
        raise GraphError(f"graph has a cycle through {stuck}")
    return order


def expected_hw(op: str, h: int, w: int, k: int, stride: int, attrs: dict) -> tuple[int, int]:
    if op == "pool" and attrs.get("global"):
        return 1, 1
    if op in ("conv", "pool"):
        return -(-h // stride), -(-w // stride)
    return h, w


def validate(g: GraphSpec) -> None:
    """Check naming, ordering, fan-in, bit-depth agreement and shape propagation."""
    seen = {INPUT}
    names = [layer.name for layer in g.layers]
    if len(set(names)) != len(names) or INPUT in names:
        raise GraphError("layer names must be unique and differ from 'input'")
    position = {name: i for i, name in enumerate(names)}
    for src, dst in g.edges:
        if dst not in position:
            raise GraphError(f"edge {src}->{dst} points at an unknown layer")
        if src != INPUT and src not in position:
            raise GraphError(f"edge {src}->{dst} starts at an unknown layer")
        if src != INPUT and position[src] >= position[dst]:
            raise GraphError(f"edge {src}->{dst} is not in topological order (cycle?)")
    for layer in g.layers:
        if layer.op not in OPS:
            raise GraphError(f"{layer.name}: unknown op {layer.op!r}")
        prods = g.producers(layer.name)
        want = 2 if layer.op == "eltwise" else 1
        if len(prods) != want:
            raise GraphError(f"{layer.name}: expected {want} input(s), got {len(prods)}")
        for src in prods:
            if src not in seen:
                raise GraphError(f"{layer.name}: input {src!r} is not defined earlier")
            bits = g.out_bits(src)
            if bits != layer.in_bits:
                hint = ""
                if layer.op == "conv" and layer.in_bits == 1:
                    hint = "; a 1-bit conv input needs an explicit sign node"
                raise GraphError(
                    f"{layer.name}: consumes {bits}-bit data from {src!r} but in_bits={layer.in_bits}{hint}"
                )
            b, h, w, c = g.out_shape(src)
            if c != layer.C or b != layer.B:
                raise GraphError(f"{layer.name}: expects C={layer.C}, B={layer.B}; {src!r} gives C={c}, B={b}")
            if (layer.H_out, layer.W_out) != expected_hw(layer.op, h, w, layer.K, layer.stride, layer.attrs):
                raise GraphError(f"{layer.name}: output {layer.H_out}x{layer.W_out} inconsistent with input {h}x{w}")
        if layer.op != "conv" and layer.op != "pool" and layer.N != layer.C:
            raise GraphError(f"{layer.name}: {layer.op} cannot change the channel count")
        seen.add(layer.name)


# -- builders ---------------------------------------------------------------


def scaled(channels: int, m: float) -> int:
    return max(1, int(round(channels * m)))


class _Builder:
    """Appends layers to a graph while tracking the current tensor."""

    def __init__(self, g: GraphSpec, cur: str):
        self.g = g
        self.cur = cur

    def shape(self, name=None):
        return self.g.out_shape(name or self.cur)

    def conv(self, name, n, k, stride, in_bits, out_bits, src=None, **kw):
        src = src or self.cur
        b, h, w, c = self.g.out_shape(src)
        ho, wo = expected_hw("conv", h, w, k, stride, {})
        self.g.add(Layer(name, "conv", n, c, ho, wo, k, stride, in_bits, out_bits, b, **kw), [src])
        self.cur = name
        return name

    def unary(self, name, op, in_bits, out_bits, src=None, **kw):
        src = src or self.cur
        b, h, w, c = self.g.out_shape(src)
        self.g.add(Layer(name, op, c, c, h, w, 1, 1, in_bits, out_bits, b, **kw), [src])
        self.cur = name
        return name

    def pool(self, name, k, stride, in_bits, out_bits, mode="max", global_=False, src=None, **kw):
        src = src or self.cur
        b, h, w, c = self.g.out_shape(src)
        attrs = {"mode": mode}
        if global_:
            attrs["global"] = True
            k, stride = h, 1
        ho, wo = expected_hw("pool", h, w, k, stride, attrs)
        self.g.add(Layer(name, "pool", c, c, ho, wo, k, stride, in_bits, out_bits, b, attrs=attrs, **kw), [src])
        self.cur = name
        return name

    def add(self, name, a, b_, bits, **kw):
        bb, h, w, c = self.g.out_shape(a)
        self.g.add(Layer(name, "eltwise", c, c, h, w, 1, 1, bits, bits, bb, **kw), [a, b_])
        self.cur = name
        return name


def _block_input_bits(kind: str) -> int:
    return 1 if kind == "BiNeal" else 8


def _append_block(bld: _Builder, kind, cout, stride, prefix, skip_kernel=3):
    """Append one block reading ``bld.cur``; channel counts are already multiplied."""
    x = bld.cur
    _, _, _, cin = bld.shape(x)
    p = f"{prefix}." if prefix else ""
    downsample = stride != 1 or cin != cout
    if kind == "ResBlock":
        bld.conv(p + "conv1", cout, 3, stride, 8, 8, src=x)
        bld.unary(p + "bn1", "bn", 8, 8)
        bld.unary(p + "relu1", "relu", 8, 8)
        bld.conv(p + "conv2", cout, 3, 1, 8, 8)
        y = bld.unary(p + "bn2", "bn", 8, 8)
        short = x
        if downsample:
            bld.conv(p + "downsample", cout, 1, stride, 8, 8, src=x)
            short = bld.unary(p + "downsample_bn", "bn", 8, 8)
        bld.add(p + "add", y, short, 8, array="int8")
        return bld.unary(p + "relu2", "relu", 8, 8)
    if kind == "BiReal":
        bld.unary(p + "sign1", "sign", 8, 1, src=x, array="binary")
        bld.conv(p + "conv1", cout, 3, stride, 1, 8)
        y = bld.unary(p + "bn1", "bn", 8, 8, array="binary")
        short = x
        if downsample:
            bld.pool(p + "downsample_pool", 2, stride, 8, 8, mode="avg", src=x, array="binary")
            bld.conv(p + "downsample", cout, 1, 1, 8, 8)
            short = bld.unary(p + "downsample_bn", "bn", 8, 8)
        h1 = bld.add(p + "add1", y, short, 8, array="binary")
        bld.unary(p + "sign2", "sign", 8, 1, array="binary")
        bld.conv(p + "conv2", cout, 3, 1, 1, 8)
        y2 = bld.unary(p + "bn2", "bn", 8, 8, array="binary")
        return bld.add(p + "add2", y2, h1, 8, array="binary")
    if kind == "BiNeal":
        bld.conv(p + "conv1", cout, 3, stride, 1, 1, src=x)
        main = bld.conv(p + "conv2", cout, 3, 1, 1, 4)
        skip = bld.conv(p + "skip", cout, skip_kernel, stride, 1, 4, src=x)
        bld.add(p + "add", main, skip, 4)
        return bld.unary(p + "sign", "sign", 4, 1, attrs={"follows_eltwise": True})
    raise InvalidParam(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")


def build_block(kind, cin, cout, stride=1, m=1.0, hw=(56, 56), batch=1, skip_kernel=3) -> GraphSpec:
    """One block as a standalone graph. ``m`` widens BiNeal blocks only.

    ``hw`` is the block's *input* spatial size.
    """
    if kind not in BLOCK_KINDS:
        raise InvalidParam(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")
    if stride not in (1, 2):
        raise InvalidParam("stride must be 1 or 2")
    mult = m if kind == "BiNeal" else 1.0
    cin_m, cout_m = scaled(cin, mult), scaled(cout, mult)
    g = GraphSpec(
        name=f"{kind}-{cin}to{cout}-s{stride}",
        input_shape=(batch, hw[0], hw[1], cin_m),
        input_bits=_block_input_bits(kind),
        multiplier=mult,
        metadata={"kind": kind, "skip_kernel": skip_kernel},
    )
    _append_block(_Builder(g, INPUT), kind, cout_m, stride, "", skip_kernel)
    return g.validate()


def build_chain(n_blocks=2, channels=8, hw=6, m=1.0, skip_kernel=3, batch=1, downsample_at=(),
                stem=False) -> GraphSpec:
    """BiNeal blocks ``block0`` .. ``block{n-1}`` on a 1-bit input, small enough to execute.

    With ``stem`` the input is 8-bit and a 3x3 real conv + sign feeds the blocks.
    """
    width = scaled(channels, m)
    if stem:
        g = GraphSpec(f"bineal-chain-{n_blocks}", (batch, hw, hw, 3), 8, multiplier=m)
    else:
        g = GraphSpec(f"bineal-chain-{n_blocks}", (batch, hw, hw, width), 1, multiplier=m)
    g.metadata.update(kind="BiNeal", skip_kernel=skip_kernel)
    bld = _Builder(g, INPUT)
    if stem:
        bld.conv("stem.conv", width, 3, 1, 8, 8)
        bld.unary("stem.sign", "sign", 8, 1, array="binary")
    for i in range(n_blocks):
        _append_block(bld, "BiNeal", width, 2 if i in downsample_at else 1, f"block{i}", skip_kernel)
    return g.validate()


RESNET18_STAGES = ((64, 1), (128, 2), (256, 2), (512, 2))


def build_resnet18(kind, m=1.0, input_hw=224, include_stem=True, include_classifier=True,
                   skip_kernel=3, num_classes=1000, batch=1) -> GraphSpec:
    """ResNet-18 with every BasicBlock replaced by a ``kind`` block.

    Stem (7x7/2 conv + 3x3/2 max-pool) and classifier (global pool + fc)
    stay 8-bit. For BiNeal all block widths, and the stem width feeding them,
    are multiplied by ``m``.
    """
    if kind not in BLOCK_KINDS:
        raise InvalidParam(f"unknown block kind {kind!r}")
    mult = m if kind == "BiNeal" else 1.0
    widths = [scaled(w, mult) for w, _ in RESNET18_STAGES]
    block_bits = _block_input_bits(kind)
    if include_stem:
        g = GraphSpec(f"resnet18-{kind}-{mult:g}x", (batch, input_hw, input_hw, 3), 8, multiplier=mult)
    else:
        hw = -(-input_hw // 4)
        g = GraphSpec(f"resnet18-{kind}-{mult:g}x", (batch, hw, hw, widths[0]), block_bits, multiplier=mult)
    g.metadata.update(kind=kind, skip_kernel=skip_kernel, include_stem=include_stem,
                      include_classifier=include_classifier)
    bld = _Builder(g, INPUT)
    if include_stem:
        bld.conv("stem.conv", widths[0], 7, 2, 8, 8)
        bld.unary("stem.bn", "bn", 8, 8)
        bld.unary("stem.relu", "relu", 8, 8)
        bld.pool("stem.pool", 3, 2, 8, 8, mode="max")
        if kind == "BiNeal":
            bld.unary("stem.sign", "sign", 8, 1, array="binary")
    for si, ((_, first_stride), width) in enumerate(zip(RESNET18_STAGES, widths)):
        for bi in range(2):
            stride = first_stride if bi == 0 else 1
            _append_block(bld, kind, width, stride, f"layer{si + 1}.{bi}", skip_kernel)
    if include_classifier:
        feat_bits = g.out_bits(bld.cur)
        bld.pool("head.pool", 1, 1, feat_bits, 8, mode="avg", global_=True,
                 array="binary" if feat_bits == 1 else "int8")
        bld.conv("head.fc", num_classes, 1, 1, 8, 8)
    return g.validate()


def build_edsr(kind, n_blocks=16, channels=64, m=2.0, input_hw=(192, 192), scale=2) -> GraphSpec:
    """EDSR-style stack for cycle estimation only; head and tail convs stay 8-bit."""
    if kind not in ("ResBlock", "BiNeal"):
        raise InvalidParam("EDSR shapes support ResBlock or BiNeal bodies")
    mult = m if kind == "BiNeal" else 1.0
    width = scaled(channels, mult)
    g = GraphSpec(f"edsr-{kind}", (1, input_hw[0], input_hw[1], 3), 8, multiplier=mult,
                  metadata={"kind": kind})
    bld = _Builder(g, INPUT)
    bld.conv("head", width, 3, 1, 8, 8)
    if kind == "BiNeal":
        bld.unary("head.sign", "sign", 8, 1, array="binary")
    for i in range(n_blocks):
        _append_block(bld, kind, width, 1, f"body.{i}")
    if kind == "BiNeal":
        bld.unary("body.requant", "requant", 1, 8, array="binary")
    bld.conv("tail", 3 * scale * scale, 3, 1, 8, 8)
    return g.validate()


def insert_after(g: GraphSpec, target: str, layer_name: str, op: str) -> GraphSpec:
    """Return a copy of ``g`` with a shape- and bit-preserving ``op`` node after ``target``."""
    new = from_dict(to_dict(g))
    t = new.layer(target)
    node = Layer(layer_name, op, t.N, t.N, t.H_out, t.W_out, 1, 1, t.out_bits, t.out_bits, t.B, array=t.resolved_array())
    idx = new.layers.index(t)
    new.layers.insert(idx + 1, node)
    new.edges = [(layer_name if src == target else src, dst) for src, dst in new.edges]
    new.edges.append((target, layer_name))
    return new.validate()


# -- serialization ----------------------------------------------------------

_INT_FIELDS = ("N", "C", "H_out", "W_out", "K", "stride", "in_bits", "out_bits", "B")


def to_dict(g: GraphSpec) -> dict:
    layers = []
    for layer in g.layers:
        d = {"name": layer.name, "op": layer.op}
        d.update({f: getattr(layer, f) for f in _INT_FIELDS})
        if layer.array is not None:
            d["array"] = layer.array
        if layer.attrs:
            d["attrs"] = dict(layer.attrs)
        if layer.params:
            d["params"] = dict(layer.params)
        layers.append(d)
    return {
        "schema": SCHEMA,
        "version": SCHEMA_VERSION,
        "name": g.name,
        "multiplier": g.multiplier,
        "input": {"name": INPUT, "shape": list(g.input_shape), "bits": g.input_bits},
        "metadata": dict(g.metadata),
        "layers": layers,
        "edges": [[src, dst] for src, dst in g.edges],
    }


def to_json(g: GraphSpec, indent=2) -> str:
    return json.dumps(to_dict(g), indent=indent)


def _need(d, key, loc, kind=None):
    if not isinstance(d, dict) or key not in d:
        raise ParseError(f"missing field {key!r}", loc)
    v = d[key]
    if kind is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise ParseError(f"field {key!r} must be an integer", f"{loc}.{key}")
    if kind is str and not isinstance(v, str):
        raise ParseError(f"field {key!r} must be a string", f"{loc}.{key}")
    return v


def from_dict(d: dict) -> GraphSpec:
    if not isinstance(d, dict):
        raise ParseError("graph document must be an object", "$")
    if d.get("schema") != SCHEMA:
        raise ParseError(f"schema must be {SCHEMA!r}", "$.schema")
    if d.get("version") != SCHEMA_VERSION:
        raise ParseError(f"unsupported version {d.get('version')!r}", "$.version")
    inp = _need(d, "input", "$")
    shape = _need(inp, "shape", "$.input")
    if not (isinstance(shape, list) and len(shape) == 4 and all(isinstance(v, int) for v in shape)):
        raise ParseError("input shape must be four integers", "$.input.shape")
    bits = _need(inp, "bits", "$.input", int)
    layers = []
    raw_layers = _need(d, "layers", "$")
    if not isinstance(raw_layers, list):
        raise ParseError("layers must be a list", "$.layers")
    for i, ld in enumerate(raw_layers):
        loc = f"$.layers[{i}]"
        name = _need(ld, "name", loc, str)
        op = _need(ld, "op", loc, str)
        if op not in OPS:
            raise ParseError(f"unknown op kind {op!r}", f"{loc}.op")
        vals = {f: _need(ld, f, loc, int) for f in _INT_FIELDS}
        for f in ("in_bits", "out_bits"):
            if vals[f] not in BITS:
                raise ParseError(f"bit-depth must be one of {BITS}", f"{loc}.{f}")
        array = ld.get("array")
        if array is not None and array not in ARRAYS:
            raise ParseError(f"array must be one of {ARRAYS}", f"{loc}.array")
        layers.append(Layer(name, op, array=array, attrs=dict(ld.get("attrs", {})),
                            params=dict(ld.get("params", {})), **vals))
    edges = []
    raw_edges = _need(d, "edges", "$")
    for i, e in enumerate(raw_edges):
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(v, str) for v in e)):
            raise ParseError("edge must be [producer, consumer]", f"$.edges[{i}]")
        edges.append((e[0], e[1]))
    g = GraphSpec(
        name=str(d.get("name", "")),
        input_shape=tuple(shape),
        input_bits=bits,
        layers=layers,
        edges=edges,
        multiplier=float(d.get("multiplier", 1.0)),
        metadata=dict(d.get("metadata", {})),
    )
    try:
        validate(g)
    except GraphError as exc:
        raise ParseError(str(exc), "$.layers") from exc
    return g


def from_json(text: str) -> GraphSpec:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", f"line {exc.lineno} col {exc.colno}") from exc
    return from_dict(d)
