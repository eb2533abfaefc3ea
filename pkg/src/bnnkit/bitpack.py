"""Packed tensor formats for 1-bit and INT4 activations.

Bit encoding: bit 1 is +1, bit 0 is -1. Channels vary fastest (NHWC) and are
packed LSB-first into 64-bit words; the channel axis is zero-padded to a whole
number of words, so padding bits read as -1. Kernels must mask them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParam, InvalidValue, ShapeError

WORD_BITS = 64
INT4_MIN, INT4_MAX = -8, 7


def words_per_pixel(channels: int) -> int:
    return -(-channels // WORD_BITS)


def channel_mask(channels: int) -> np.ndarray:
    """Per-word masks selecting the valid channel bits of one pixel."""
    nw = words_per_pixel(channels)
    mask = np.full(nw, np.iinfo(np.uint64).max, dtype=np.uint64)
    tail = channels % WORD_BITS
    if tail:
        mask[-1] = np.uint64((1 << tail) - 1)
    return mask


@dataclass(frozen=True, eq=False)
class PackedBitTensor:
    """NHWC +-1 tensor with channels packed into uint64 words.

    ``words`` has shape (B, H, W, ceil(C / 64)).
    """

    words: np.ndarray
    channels: int

    def __post_init__(self):
        if self.words.ndim != 4 or self.words.dtype != np.uint64:
            raise ShapeError("words must be a 4-d uint64 array")
        if self.channels < 1 or self.words.shape[-1] != words_per_pixel(self.channels):
            raise ShapeError(
                f"{self.words.shape[-1]} words per pixel cannot hold {self.channels} channels"
            )

    @property
    def shape(self) -> tuple[int, int, int, int]:
        b, h, w, _ = self.words.shape
        return (b, h, w, self.channels)

    def padding_is_clear(self) -> bool:
        return not np.any(self.words & ~channel_mask(self.channels))

    def __eq__(self, other):
        if not isinstance(other, PackedBitTensor):
            return NotImplemented
        return self.channels == other.channels and np.array_equal(self.words, other.words)


def pack(signs) -> PackedBitTensor:
    """Pack a +-1 NHWC tensor. Any element other than +1/-1 raises InvalidValue."""
    signs = np.asarray(signs)
    if signs.ndim != 4:
        raise ShapeError(f"expected an NHWC tensor, got {signs.ndim} dims")
    if not np.all((signs == 1) | (signs == -1)):
        raise InvalidValue("pack() accepts only +1 and -1 elements")
    c = signs.shape[-1]
    nw = words_per_pixel(c)
    bits = np.zeros(signs.shape[:-1] + (nw * WORD_BITS,), dtype=np.uint8)
    bits[..., :c] = signs > 0
    raw = np.packbits(bits, axis=-1, bitorder="little")
    words = np.ascontiguousarray(raw).view("<u8").astype(np.uint64)
    return PackedBitTensor(words, c)


def unpack(t: PackedBitTensor) -> np.ndarray:
    """Inverse of :func:`pack`; returns an int8 +-1 array."""
    raw = np.ascontiguousarray(t.words.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")[..., : t.channels]
    return (bits.astype(np.int8) * 2 - 1).astype(np.int8)


@dataclass(frozen=True, eq=False)
class Int4Tensor:
    """Signed 4-bit NHWC tensor, two values per byte, even channel in the low nibble."""

    data: np.ndarray
    channels: int

    @classmethod
    def from_values(cls, values) -> "Int4Tensor":
        values = np.asarray(values)
        if values.ndim != 4:
            raise ShapeError("expected an NHWC tensor")
        if values.size and (values.min() < INT4_MIN or values.max() > INT4_MAX):
            raise InvalidValue("INT4 values must lie in [-8, 7]")
        c = values.shape[-1]
        nib = (values.astype(np.int16) & 0xF).astype(np.uint8)
        if c % 2:
            nib = np.concatenate([nib, np.zeros(nib.shape[:-1] + (1,), np.uint8)], axis=-1)
        data = nib[..., 0::2] | (nib[..., 1::2] << 4)
        return cls(np.ascontiguousarray(data), c)

    def values(self) -> np.ndarray:
        lo = (self.data & 0xF).astype(np.int8)
        hi = (self.data >> 4).astype(np.int8)
        out = np.empty(self.data.shape[:-1] + (2 * self.data.shape[-1],), np.int8)
        out[..., 0::2] = lo
        out[..., 1::2] = hi
        out = out[..., : self.channels]
        return np.where(out > 7, out - 16, out).astype(np.int8)

    @property
    def shape(self):
        return self.data.shape[:-1] + (self.channels,)

    def __eq__(self, other):
        if not isinstance(other, Int4Tensor):
            return NotImplemented
        return self.channels == other.channels and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class AccumTensor:
    """Raw binary-conv accumulators, int32 (B, H, W, N); each |y| <= length."""

    values: np.ndarray
    length: int

    def __post_init__(self):
        if self.values.dtype != np.int32:
            raise ShapeError("accumulators are int32")
        if self.values.size and np.abs(self.values).max() > self.length:
            raise InvalidValue(f"accumulator exceeds +-{self.length}")

    @property
    def shape(self):
        return self.values.shape


def quantize_int4(v) -> np.ndarray:
    """Round half to even, then saturate to [-8, 7]."""
    return np.clip(np.rint(v), INT4_MIN, INT4_MAX).astype(np.int8)


def to_int4(a, scale, offset) -> Int4Tensor:
    """q = clamp(round(scale * y + offset), -8, 7), per output channel."""
    y = a.values if isinstance(a, AccumTensor) else np.asarray(a)
    scale = np.asarray(scale, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(offset))):
        raise InvalidParam("requant scale/offset must be finite")
    if np.any(scale == 0):
        raise InvalidParam("requant scale must be nonzero")
    return Int4Tensor.from_values(quantize_int4(scale * y.astype(np.float64) + offset))
