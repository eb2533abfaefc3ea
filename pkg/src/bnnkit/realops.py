"""Plain real-valued ops for the 8-bit boundary layers (stem, classifier).

These sit outside the binary fast path; the reference model and the engine
both call them, so they are not part of any equivalence claim.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .refmodel import ref_conv


def real_conv(x, weight, bias=None, stride=1, padding=None) -> np.ndarray:
    weight = np.asarray(weight, dtype=np.float64)
    k = weight.shape[2]
    out = ref_conv(weight, x, stride, k // 2 if padding is None else padding, pad_value=0.0)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return out


def affine(x, gamma=1.0, beta=0.0) -> np.ndarray:
    return np.asarray(gamma, np.float64) * np.asarray(x, np.float64) + np.asarray(beta, np.float64)


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, np.float64), 0.0)


def prelu(x, slope) -> np.ndarray:
    x = np.asarray(x, np.float64)
    return np.where(x > 0, x, np.asarray(slope, np.float64) * x)


def pool(x, k, stride, out_hw, mode="max", global_=False) -> np.ndarray:
    """Max/avg pooling over valid elements only; odd windows are centred."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError("pool expects NHWC input")
    if global_:
        red = x.max(axis=(1, 2)) if mode == "max" else x.mean(axis=(1, 2))
        return red[:, None, None, :]
    b, h, w, c = x.shape
    ho, wo = out_hw
    pad = k // 2 if k % 2 else 0
    need_h = (ho - 1) * stride + k
    need_w = (wo - 1) * stride + k
    xp = np.full((b, max(need_h, h + pad), max(need_w, w + pad), c), np.nan)
    xp[:, pad : pad + h, pad : pad + w] = x
    stack = np.stack([
        xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
        for i in range(k) for j in range(k)
    ])
    return np.nanmax(stack, axis=0) if mode == "max" else np.nanmean(stack, axis=0)
