"""Bit-exact execution of fused graphs on packed tensors.

Binary convolutions run directly on the packed words: for each kernel tap the
input word is XNORed with the weight word, masked to the valid channel bits
and popcounted, so y = 2 * agreements - C*K*K. Spatial padding is all-zero
words, i.e. -1 activations, matching the reference model.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bitpack import (
    WORD_BITS,
    AccumTensor,
    Int4Tensor,
    PackedBitTensor,
    channel_mask,
    pack,
    to_int4,
    unpack,
    words_per_pixel,
)
from .errors import GraphError, InvalidParam, ParseError, ShapeError
from .fusion import (
    Direction,
    FusedBinaryConvUnit,
    FusedBlock,
    fused_sign_from_layer,
    fused_unit_from_layer,
)
from .graphs import BLOCK_KINDS, INPUT, GraphSpec, topological_order
from .refmodel import is_binary_conv
from . import realops

N_TILE = 32


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    Cin: int
    Cout: int
    stride: int = 1
    m: float = 1.0
    skip_kernel: int = 3

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise InvalidParam(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise InvalidParam("stride must be 1 or 2")
        if self.m <= 0 or self.Cin < 1 or self.Cout < 1:
            raise InvalidParam("channel counts and multiplier must be positive")

    @property
    def has_skip_conv(self) -> bool:
        # BiNeal always carries a binary skip conv; the others only when downsampling
        return self.kind == "BiNeal" or self.stride != 1 or self.Cin != self.Cout


def _popcount_masked_xnor(a, w, mask):
    return np.bitwise_count(~(a ^ w) & mask).astype(np.int32)


def xnor_dot(a, w, length: int) -> int:
    """+-1 dot product of two packed rows of ``length`` valid bits."""
    a = np.asarray(a, dtype=np.uint64).ravel()
    w = np.asarray(w, dtype=np.uint64).ravel()
    if a.shape != w.shape or a.size != words_per_pixel(length):
        raise ShapeError(f"rows of {a.size} and {w.size} words cannot hold {length} bits")
    agree = int(_popcount_masked_xnor(a, w, channel_mask(length)).sum())
    return 2 * agree - length


def _conv_tile(xp, weight, mask, k, stride, ho, wo):
    b = xp.shape[0]
    acc = np.zeros((b, ho, wo, weight.shape[0]), np.int32)
    for i in range(k):
        for j in range(k):
            patch = xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            acc += _popcount_masked_xnor(patch[..., None, :], weight[:, i, j, :], mask).sum(axis=-1, dtype=np.int32)
    return acc


def binary_conv(x: PackedBitTensor, unit: FusedBinaryConvUnit, threads: int = 1) -> AccumTensor:
    """Integer accumulators y (B, Ho, Wo, N) of a packed binary convolution.

    Output channels are split into tiles; ``threads`` > 1 runs tiles
    concurrently. Tiling never changes the result.
    """
    if x.channels != unit.n_in:
        raise ShapeError(f"input has {x.channels} channels, weights expect {unit.n_in}")
    k, s, p = unit.kernel, unit.stride, unit.padding
    b, h, w, _ = x.shape
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")
    xp = np.pad(x.words, ((0, 0), (p, p), (p, p), (0, 0)))
    mask = channel_mask(unit.n_in)
    weight = unit.weight.words
    tiles = [slice(n, min(n + N_TILE, unit.n_out)) for n in range(0, unit.n_out, N_TILE)]

    def run(t):
        return _conv_tile(xp, weight[t], mask, k, s, ho, wo)

    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, tiles))
    else:
        parts = [run(t) for t in tiles]
    agree = np.concatenate(parts, axis=-1)
    return AccumTensor(2 * agree - np.int32(unit.length), unit.length)


def _compare(y, theta, direction):
    ge = np.asarray(direction) == Direction.GE
    return np.where(ge, y >= theta, y <= theta)


def threshold_sign(a, unit) -> PackedBitTensor:
    """Per channel: GE -> +1 iff y >= theta_int; LE -> +1 iff y <= theta_int.

    ``a`` may be an AccumTensor, an Int4Tensor or a real array; real inputs
    are compared against the real threshold of a FusedSign.
    """
    if isinstance(unit, FusedBinaryConvUnit) and unit.out_kind != "bit1":
        raise InvalidParam("threshold_sign needs a bit1 unit")
    if isinstance(a, AccumTensor):
        y = a.values
    elif isinstance(a, Int4Tensor):
        y = a.values()
    else:
        y = np.asarray(a)
    integer = np.issubdtype(y.dtype, np.integer)
    if integer and unit.theta_int is None:
        raise InvalidParam("integer input needs an integer threshold")
    theta = unit.theta_int if integer else unit.theta
    bits = _compare(y, theta, unit.direction)
    return pack(np.where(bits, 1, -1).astype(np.int8))


def requantize(a: AccumTensor, unit: FusedBinaryConvUnit) -> Int4Tensor:
    if unit.out_kind != "int4":
        raise InvalidParam("requantize needs an int4 unit")
    return to_int4(a, unit.requant_scale, unit.requant_offset)


def eltwise_add_int4(a: Int4Tensor, b: Int4Tensor) -> Int4Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}")
    s = a.values().astype(np.int16) + b.values().astype(np.int16)
    return Int4Tensor.from_values(np.clip(s, -8, 7).astype(np.int8))


def run_unit(x: PackedBitTensor, unit: FusedBinaryConvUnit, threads: int = 1):
    acc = binary_conv(x, unit, threads)
    return threshold_sign(acc, unit) if unit.out_kind == "bit1" else requantize(acc, unit)


def run_block(block: FusedBlock, x: PackedBitTensor, threads: int = 1) -> PackedBitTensor:
    a1 = run_unit(x, block.conv1, threads)
    main = run_unit(a1, block.conv2, threads)
    skip = run_unit(x, block.skip, threads)
    return threshold_sign(eltwise_add_int4(main, skip), block.final)


# -- graphs -----------------------------------------------------------------


def as_dense(v) -> np.ndarray:
    """Packed values to plain arrays: +-1 int8, INT4 int8, reals untouched."""
    if isinstance(v, PackedBitTensor):
        return unpack(v)
    if isinstance(v, Int4Tensor):
        return v.values()
    return np.asarray(v)


def _real_pool(layer, v):
    return realops.pool(as_dense(v), layer.K, layer.stride, (layer.H_out, layer.W_out),
                        layer.attrs.get("mode", "max"), bool(layer.attrs.get("global")))


def _or_pool(layer, x: PackedBitTensor) -> PackedBitTensor:
    # max over +-1 values is a bitwise OR; out-of-range taps act as -1 (zero words)
    k, s = layer.K, layer.stride
    pad = k // 2 if k % 2 else 0
    b, h, w, _ = x.shape
    ho, wo = layer.H_out, layer.W_out
    hp = max((ho - 1) * s + k, h + pad)
    wp = max((wo - 1) * s + k, w + pad)
    xp = np.zeros((b, hp, wp, x.words.shape[-1]), np.uint64)
    xp[:, pad : pad + h, pad : pad + w] = x.words
    out = np.zeros((b, ho, wo, x.words.shape[-1]), np.uint64)
    for i in range(k):
        for j in range(k):
            out |= xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
    return PackedBitTensor(out, x.channels)


def _param(layer, tensors, role, default):
    name = layer.params.get(role)
    return default if name is None else np.asarray(tensors[name])


def _run_layer(layer, tensors, ins, threads):
    a = ins[0]
    if is_binary_conv(layer):
        if not isinstance(a, PackedBitTensor):
            raise GraphError(f"layer {layer.name!r} expects a packed 1-bit input")
        return run_unit(a, fused_unit_from_layer(layer, tensors), threads)
    if layer.op == "conv":
        return realops.real_conv(as_dense(a), _param(layer, tensors, "weight", None),
                                 _param(layer, tensors, "bias", np.zeros(layer.N)), layer.stride)
    if layer.op == "eltwise":
        if layer.in_bits == 4:
            return eltwise_add_int4(ins[0], ins[1])
        if layer.in_bits >= 8:
            return as_dense(ins[0]).astype(np.float64) + as_dense(ins[1])
    elif layer.op == "sign":
        return threshold_sign(a, fused_sign_from_layer(layer, tensors))
    elif layer.op == "pool":
        if layer.in_bits == 1 and layer.out_bits == 1:
            if layer.attrs.get("mode", "max") != "max" or layer.attrs.get("global"):
                raise GraphError(f"layer {layer.name!r}: only windowed max-pool keeps 1-bit data")
            return _or_pool(layer, a)
        return _real_pool(layer, a)
    elif layer.op == "requant" and layer.out_bits >= 8:
        return as_dense(a).astype(np.float64)
    elif layer.in_bits >= 8:
        if layer.op == "bn":
            return realops.affine(a, _param(layer, tensors, "gamma", 1.0), _param(layer, tensors, "beta", 0.0))
        if layer.op == "scale":
            return realops.affine(a, _param(layer, tensors, "scale", 1.0))
        if layer.op == "relu":
            return realops.relu(a)
        if layer.op == "prelu":
            return realops.prelu(a, _param(layer, tensors, "slope", 0.25))
    raise GraphError(f"layer {layer.name!r}: op {layer.op!r} on {layer.in_bits}-bit data is not executable")


def run_graph(g: GraphSpec, tensors: dict, x, threads: int = 1):
    """Execute a fused graph. 1-bit inputs may be packed or +-1 arrays.

    Returns the last unconsumed layer's value (PackedBitTensor, Int4Tensor or
    float64 array). An empty graph returns its input.
    """
    if g.input_bits == 1 and not isinstance(x, PackedBitTensor):
        x = pack(np.asarray(x))
    elif g.input_bits == 4 and not isinstance(x, Int4Tensor):
        x = Int4Tensor.from_values(np.asarray(x))
    shape = x.shape if hasattr(x, "shape") else np.shape(x)
    if tuple(shape) != tuple(g.input_shape):
        raise ShapeError(f"input shape {tuple(shape)} does not match graph input {tuple(g.input_shape)}")
    order = topological_order(g)
    values = {INPUT: x}
    for layer in order:
        ins = [values[p] for p in g.producers(layer.name)]
        values[layer.name] = _run_layer(layer, tensors, ins, threads)
    return values[g.outputs()[-1]] if order else x


# -- raw tensor blobs -------------------------------------------------------

BLOB_MAGIC = 0x42544E42  # "BNTB" little-endian
_HEADER = struct.Struct("<8I")
# code -> (numpy dtype, word size in bits)
BLOB_DTYPES = {
    1: ("<u8", WORD_BITS),  # packed 1-bit words
    2: ("u1", 8),  # INT4 nibble pairs
    3: ("i1", 8),
    4: ("<i4", 32),
    5: ("<f4", 32),
    6: ("<f8", 64),
}


def write_blob(value) -> bytes:
    """Serialize a tensor: 8 little-endian uint32 header fields, then raw data."""
    if isinstance(value, PackedBitTensor):
        code, data, shape = 1, value.words, value.shape
    elif isinstance(value, Int4Tensor):
        code, data, shape = 2, value.data, value.shape
    else:
        data = np.asarray(value)
        if data.ndim != 4:
            raise ShapeError("blobs hold NHWC tensors")
        kinds = {np.dtype(np.int8): 3, np.dtype(np.int32): 4, np.dtype(np.float32): 5, np.dtype(np.float64): 6}
        if data.dtype not in kinds:
            raise InvalidParam(f"no blob encoding for dtype {data.dtype}")
        code, shape = kinds[data.dtype], data.shape
    dtype, word = BLOB_DTYPES[code]
    header = _HEADER.pack(BLOB_MAGIC, code, *shape, word, 0)
    return header + np.ascontiguousarray(data, dtype=dtype).tobytes()


def read_blob(buf: bytes):
    if len(buf) < _HEADER.size:
        raise ParseError("blob shorter than its header", "header")
    magic, code, b, h, w, c, word, _ = _HEADER.unpack_from(buf)
    if magic != BLOB_MAGIC:
        raise ParseError("bad magic", "header.magic")
    if code not in BLOB_DTYPES:
        raise ParseError(f"unknown dtype code {code}", "header.dtype")
    dtype, expect_word = BLOB_DTYPES[code]
    if word != expect_word:
        raise ParseError(f"word size {word} does not match dtype code {code}", "header.word_size")
    last = {1: words_per_pixel(c), 2: (c + 1) // 2}.get(code, c)
    count = b * h * w * last
    nbytes = count * np.dtype(dtype).itemsize
    if len(buf) - _HEADER.size != nbytes:
        raise ParseError(f"expected {nbytes} data bytes, found {len(buf) - _HEADER.size}", "data")
    data = np.frombuffer(buf, dtype=dtype, offset=_HEADER.size).reshape(b, h, w, last).copy()
    if code == 1:
        return PackedBitTensor(data.astype(np.uint64), c)
    if code == 2:
        return Int4Tensor(data.astype(np.uint8), c)
    return data.astype(data.dtype.newbyteorder("="))
