"""BNLM model containers: a graph plus its named parameter tensors.

Layout (all integers little-endian)::

    header   "BNLM" | u16 version | u8 kind (0 training, 1 fused) | u8 reserved
             | u64 graph offset | u64 graph length | u32 graph crc32
             | u64 tensor offset | u64 tensor length | u32 tensor crc32
    graph    UTF-8 JSON (see bnnkit.graphs)
    tensors  u32 count, then per tensor:
             u16 name length | name | u8 dtype | u8 ndim | u64 dims[ndim]
             | u64 byte length | data

Real training parameters are stored as float32 when that is exact and as
float64 otherwise, so reading back always yields the written values. Fused
thresholds and requant affines stay float64: they were computed in double
precision and rounding them could move a decision boundary. Integer
thresholds are int32 and comparison directions a bitmask (bit set = LE).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .graphs import GraphSpec, from_json, to_json

MAGIC = b"BNLM"
VERSION = 1
KINDS = ("training", "fused")
_HEADER = struct.Struct("<4sHBBQQIQQI")

F32, F64, I32, U64, BITMASK, U8, I8, I64 = range(1, 9)
_DTYPES = {F32: "<f4", F64: "<f8", I32: "<i4", U64: "<u8", U8: "u1", I8: "i1", I64: "<i8"}
_FUSED_F64_ROLES = ("theta", "requant_scale", "requant_offset")


@dataclass
class ModelContainer:
    kind: str
    graph: GraphSpec
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def check(self):
        """Every parameter name must resolve to exactly one tensor, and none may dangle."""
        if self.kind not in KINDS:
            raise ParseError(f"unknown container kind {self.kind!r}", "header.kind")
        used = set()
        for layer in self.graph.layers:
            for role, name in layer.params.items():
                if name not in self.tensors:
                    raise ParseError(f"tensor {name!r} is missing", f"layers.{layer.name}.params.{role}")
                if name in used:
                    raise ParseError(f"tensor {name!r} is bound twice", f"layers.{layer.name}.params.{role}")
                used.add(name)
        extra = sorted(set(self.tensors) - used)
        if extra:
            raise ParseError(f"unreferenced tensors {extra}", "tensors")
        return self


def _encode(name: str, arr: np.ndarray, kind: str) -> tuple[int, np.ndarray]:
    arr = np.asarray(arr)
    role = name.rsplit(".", 1)[-1]
    if role == "direction":
        return BITMASK, arr
    if arr.dtype == np.bool_:
        return U8, arr.astype(np.uint8)
    if np.issubdtype(arr.dtype, np.floating):
        if kind == "fused" and role in _FUSED_F64_ROLES:
            return F64, arr
        as32 = arr.astype(np.float32)
        exact = np.array_equal(as32.astype(arr.dtype), arr, equal_nan=True)
        return (F32, as32) if exact else (F64, arr)
    table = {np.dtype(np.int32): I32, np.dtype(np.uint64): U64, np.dtype(np.uint8): U8,
             np.dtype(np.int8): I8, np.dtype(np.int64): I64}
    if arr.dtype not in table:
        raise ParseError(f"cannot store dtype {arr.dtype}", f"tensors.{name}")
    return table[arr.dtype], arr


def _tensor_section(tensors: dict, kind: str) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        code, arr = _encode(name, tensors[name], kind)
        if code == BITMASK:
            data = np.packbits(np.asarray(arr, dtype=np.uint8).ravel() != 0, bitorder="little").tobytes()
        else:
            data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(struct.pack("<Q", len(data)) + data)
    return b"".join(out)


def dumps(c: ModelContainer) -> bytes:
    c.check()
    graph = to_json(c.graph).encode()
    tens = _tensor_section(c.tensors, c.kind)
    g_off = _HEADER.size
    t_off = g_off + len(graph)
    header = _HEADER.pack(MAGIC, VERSION, KINDS.index(c.kind), 0, g_off, len(graph),
                          zlib.crc32(graph), t_off, len(tens), zlib.crc32(tens))
    return header + graph + tens


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str, loc: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise ParseError("truncated tensor section", loc)
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def bytes(self, n: int, loc: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError("truncated tensor section", loc)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def _read_tensors(buf: bytes) -> dict:
    r = _Reader(buf)
    (count,) = r.take("<I", "tensors.count")
    out = {}
    for i in range(count):
        loc = f"tensors[{i}]"
        (nlen,) = r.take("<H", loc)
        try:
            name = r.bytes(nlen, loc).decode()
        except UnicodeDecodeError as exc:
            raise ParseError("tensor name is not UTF-8", loc) from exc
        loc = f"tensors.{name}"
        code, ndim = r.take("<BB", loc)
        shape = r.take(f"<{ndim}Q", loc) if ndim else ()
        (nbytes,) = r.take("<Q", loc)
        data = r.bytes(nbytes, loc)
        n = int(np.prod(shape, dtype=np.int64))
        if code == BITMASK:
            if nbytes != -(-n // 8):
                raise ParseError("bitmask length does not match its shape", loc)
            bits = np.unpackbits(np.frombuffer(data, np.uint8), count=n, bitorder="little")
            arr = bits.reshape(shape).astype(np.uint8)
        elif code in _DTYPES:
            dt = np.dtype(_DTYPES[code])
            if nbytes != n * dt.itemsize:
                raise ParseError("byte length does not match shape and dtype", loc)
            arr = np.frombuffer(data, dt).reshape(shape).astype(dt.newbyteorder("="))
            if code == F32:
                arr = arr.astype(np.float64)
        else:
            raise ParseError(f"unknown dtype code {code}", loc)
        if name in out:
            raise ParseError("duplicate tensor name", loc)
        out[name] = arr
    if r.pos != len(buf):
        raise ParseError("trailing bytes after last tensor", "tensors")
    return out


def loads(buf: bytes) -> ModelContainer:
    if len(buf) < _HEADER.size:
        raise ParseError("file shorter than the header", "header")
    magic, version, kind, _, g_off, g_len, g_crc, t_off, t_len, t_crc = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", "header.magic")
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", "header.version")
    if kind >= len(KINDS):
        raise ParseError(f"unknown kind code {kind}", "header.kind")
    sections = {}
    for label, off, length, crc in (("graph", g_off, g_len, g_crc), ("tensors", t_off, t_len, t_crc)):
        if off < _HEADER.size or off + length > len(buf):
            raise ParseError("section lies outside the file", f"header.{label}")
        body = buf[off : off + length]
        if zlib.crc32(body) != crc:
            raise ParseError("checksum mismatch", f"{label}")
        sections[label] = body
    try:
        text = sections["graph"].decode()
    except UnicodeDecodeError as exc:
        raise ParseError("graph section is not UTF-8", "graph") from exc
    return ModelContainer(KINDS[kind], from_json(text), _read_tensors(sections["tensors"])).check()


def save(path, c: ModelContainer):
    with open(path, "wb") as fh:
        fh.write(dumps(c))


def load(path) -> ModelContainer:
    with open(path, "rb") as fh:
        return loads(fh.read())
