"""Compile training-form units into packed weights and integer thresholds.

For a 1-bit output channel the whole chain collapses to one comparison of the
raw accumulator y against an integer threshold:

    direction GE:  +1 iff y >= theta_int
    direction LE:  +1 iff y <= theta_int

The threshold comes from the zero crossing of the monotone function
g(A) = PReLU(tau' * A + b0') + b1, see :func:`solve_threshold`. The closed
form sometimes quoted for this threshold, ``-b1/(a*tau) - b0`` for b1 <= 0 and
``-b1/tau - b0`` for b1 > 0, picks the PReLU segment opposite to the one that
holds the zero crossing and leaves b0 undivided by tau; it disagrees with the
reference forward pass, so it is kept only as :func:`closed_form_threshold`
for comparison (see tests/test_fusion.py).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .bitpack import PackedBitTensor, pack
from .errors import DegenerateChannel, GraphError, InvalidParam, ShapeError
from .graphs import GraphSpec, from_dict, to_dict, topological_order
from .refmodel import (
    OverParamConvUnit,
    SignUnit,
    TrainingBlock,
    broadcast_alpha,
    incoming_kappa,
    is_binary_conv,
    jitter_zeros,
    sign_from_params,
    unit_from_params,
)


class Direction(IntEnum):
    GE = 0
    LE = 1


@dataclass(frozen=True, eq=False)
class FusedBinaryConvUnit:
    """Inference-time state of one binary conv.

    ``weight`` packs the +-1 kernel as a (N, K, K, C) tensor. For ``bit1``
    outputs only ``theta_int`` and ``direction`` are used at run time;
    ``theta`` is the real threshold, kept for audit. ``int4`` outputs carry a
    per-channel requant affine instead.
    """

    weight: PackedBitTensor
    out_kind: str
    stride: int
    padding: int
    theta: np.ndarray | None = None
    theta_int: np.ndarray | None = None
    direction: np.ndarray | None = None
    requant_scale: np.ndarray | None = None
    requant_offset: np.ndarray | None = None

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @property
    def n_in(self) -> int:
        return self.weight.channels

    @property
    def kernel(self) -> int:
        return self.weight.shape[1]

    @property
    def length(self) -> int:
        return self.n_in * self.kernel * self.kernel


@dataclass(frozen=True, eq=False)
class FusedSign:
    """Threshold-sign on an integer (INT4) or real input, per channel."""

    theta: np.ndarray
    theta_int: np.ndarray | None
    direction: np.ndarray


@dataclass(frozen=True, eq=False)
class FusedBlock:
    conv1: FusedBinaryConvUnit
    conv2: FusedBinaryConvUnit
    skip: FusedBinaryConvUnit
    final: FusedSign

    @property
    def stride(self) -> int:
        return self.conv1.stride


def fuse_weights(weight, alpha_w) -> PackedBitTensor:
    """Pack Sign(alpha) * Sign(W_f) as an (N, K, K, C) bit tensor."""
    weight = jitter_zeros(weight)
    alpha = broadcast_alpha(alpha_w, weight.shape)
    if np.any(alpha == 0):
        raise InvalidParam("alpha_w must be nonzero")
    w_b = (np.sign(alpha) * np.sign(weight)).astype(np.int8)
    w_b = np.broadcast_to(w_b, weight.shape)
    return pack(np.ascontiguousarray(w_b.transpose(0, 2, 3, 1)))


def fold_batchnorm(gamma, beta, tau, b0):
    """tau * (gamma * x + beta) + b0 == tau' * x + b0'."""
    gamma, beta, tau, b0 = (np.asarray(v, dtype=np.float64) for v in (gamma, beta, tau, b0))
    return tau * gamma, tau * beta + b0


def absorb_incoming_scale(kappa_in, lam, gamma) -> np.ndarray:
    """gamma'(n) = gamma(n) * kappa_in * lam(n), so BN acts on the raw accumulator."""
    gamma = np.asarray(gamma, dtype=np.float64)
    n = gamma.shape[0] if gamma.ndim else 1
    lam = np.asarray(lam, dtype=np.float64)
    kappa_in = np.asarray(kappa_in, dtype=np.float64)
    for name, v in (("lam", lam), ("kappa", kappa_in)):
        if v.ndim and v.shape != (n,):
            raise ShapeError(f"{name} has {v.shape[0]} channels, BN has {n}")
    return gamma * kappa_in * lam


def prelu_zero_crossing(b1, prelu_slope) -> np.ndarray:
    """x* with PReLU(x*) + b1 == 0; PReLU(x) + b1 >= 0 exactly when x >= x*."""
    b1 = np.asarray(b1, dtype=np.float64)
    return np.where(b1 <= 0, -b1, -b1 / prelu_slope)


def solve_threshold(tau_f, b0_f, b1, prelu_slope):
    """Return (theta, direction) for Sign(PReLU(tau' * A + b0') + b1).

    GE channels output +1 iff A >= theta, LE channels iff A <= theta; A == theta
    gives a zero pre-sign value and therefore +1 either way.
    """
    tau_f = np.atleast_1d(np.asarray(tau_f, dtype=np.float64))
    b0_f = np.asarray(b0_f, dtype=np.float64)
    slope = np.asarray(prelu_slope, dtype=np.float64)
    if np.any(slope <= 0):
        raise InvalidParam("PReLU slope must be positive")
    _reject_degenerate(tau_f)
    theta = (prelu_zero_crossing(b1, slope) - b0_f) / tau_f
    direction = np.where(tau_f > 0, Direction.GE, Direction.LE).astype(np.uint8)
    return theta, direction


def closed_form_threshold(tau, b0, b1, prelu_slope) -> np.ndarray:
    """The per-b1-sign closed form discussed in the module docstring. Not used for fusion."""
    tau, b0, b1, a = (np.asarray(v, dtype=np.float64) for v in (tau, b0, b1, prelu_slope))
    return np.where(b1 <= 0, -b1 / (a * tau) - b0, -b1 / tau - b0)


def integerize_threshold(theta, direction, bound=None) -> np.ndarray:
    """Snap to the accumulator grid: ceil for GE, floor for LE.

    With ``bound`` (the accumulator magnitude limit L) the result is clipped to
    [-L-1, L+1], which leaves every |y| <= L classified the same and keeps
    thresholds in int32.
    """
    theta = np.asarray(theta, dtype=np.float64)
    direction = np.asarray(direction)
    if np.any(np.isnan(theta)) or (bound is None and not np.all(np.isfinite(theta))):
        raise InvalidParam("threshold must be finite")
    out = np.where(direction == Direction.GE, np.ceil(theta), np.floor(theta))
    if bound is not None:
        out = np.clip(out, -bound - 1, bound + 1)
    return out.astype(np.int64 if bound is None else np.int32)


def _reject_degenerate(tau_f):
    zero = np.flatnonzero(np.atleast_1d(tau_f) == 0)
    if zero.size:
        raise DegenerateChannel(f"fused scale is zero on channels {zero.tolist()}", zero)


def fuse_unit(unit: OverParamConvUnit, incoming_scale=1.0) -> FusedBinaryConvUnit:
    gamma = absorb_incoming_scale(incoming_scale, unit.lam, unit.bn_gamma)
    tau_f, b0_f = fold_batchnorm(gamma, unit.bn_beta, unit.tau, unit.b0)
    # a zero tau (or gamma, lam, kappa) leaves a constant channel; reject it by name
    _reject_degenerate(tau_f)
    unit.check()
    weight = fuse_weights(unit.weight, unit.alpha_w)
    common = dict(weight=weight, out_kind=unit.out_kind, stride=unit.stride, padding=unit.padding)
    if unit.out_kind == "int4":
        return FusedBinaryConvUnit(requant_scale=tau_f, requant_offset=b0_f, **common)
    theta, direction = solve_threshold(tau_f, b0_f, unit.b1, unit.prelu_slope)
    length = unit.n_in * unit.kernel**2
    return FusedBinaryConvUnit(
        theta=theta,
        theta_int=integerize_threshold(theta, direction, bound=length),
        direction=direction,
        **common,
    )


def fuse_sign(unit: SignUnit, incoming_scale=1.0, integer_input=True, bound=8) -> FusedSign:
    """Fuse a standalone binarizer. Integer inputs get an integer threshold."""
    gamma = np.asarray(unit.bn_gamma) * np.asarray(incoming_scale, dtype=np.float64)
    tau_f, b0_f = fold_batchnorm(gamma, unit.bn_beta, unit.tau, unit.b0)
    theta, direction = solve_threshold(tau_f, b0_f, unit.b1, unit.prelu_slope)
    theta_int = integerize_threshold(theta, direction, bound=bound) if integer_input else None
    return FusedSign(theta, theta_int, direction)


def fuse_block(block: TrainingBlock, kappa_in=1.0) -> FusedBlock:
    return FusedBlock(
        conv1=fuse_unit(block.conv1, kappa_in),
        conv2=fuse_unit(block.conv2, block.conv1.kappa),
        skip=fuse_unit(block.skip, kappa_in),
        final=fuse_sign(block.final),
    )


# -- graphs -----------------------------------------------------------------

FUSED_CONV_ROLES = {
    "bit1": ("weight_bits", "theta", "theta_int", "direction"),
    "int4": ("weight_bits", "requant_scale", "requant_offset"),
}


def fuse_graph(g: GraphSpec, tensors: dict) -> tuple[GraphSpec, dict]:
    """Fuse every binary conv and sign node; real boundary layers pass through.

    Incoming activation scales are resolved in topological order, so each
    conv absorbs the kappa of whichever node produced its 1-bit input.
    """
    order = topological_order(g)
    fused_g = from_dict(to_dict(g))
    fused_g.metadata["form"] = "fused"
    out: dict[str, np.ndarray] = {}
    for layer in order:
        new = fused_g.layer(layer.name)
        if is_binary_conv(layer):
            try:
                unit = fuse_unit(unit_from_params(layer, tensors), incoming_kappa(g, tensors, layer))
            except DegenerateChannel as exc:
                raise DegenerateChannel(f"layer {layer.name!r}: {exc}", exc.channels) from None
            arrays = {"weight_bits": unit.weight.words}
            if unit.out_kind == "bit1":
                arrays.update(theta=unit.theta, theta_int=unit.theta_int, direction=unit.direction)
            else:
                arrays.update(requant_scale=_full(unit.requant_scale, unit.n_out),
                              requant_offset=_full(unit.requant_offset, unit.n_out))
        elif layer.op == "sign":
            integer_input = layer.in_bits == 4
            try:
                fs = fuse_sign(sign_from_params(layer, tensors), 1.0, integer_input=integer_input, bound=8)
            except DegenerateChannel as exc:
                raise DegenerateChannel(f"layer {layer.name!r}: {exc}", exc.channels) from None
            arrays = {"theta": fs.theta, "direction": fs.direction}
            if integer_input:
                arrays["theta_int"] = fs.theta_int
        else:
            for role, name in layer.params.items():
                out[name] = np.asarray(tensors[name])
            continue
        new.params = {role: f"{layer.name}.{role}" for role in arrays}
        for role, arr in arrays.items():
            out[f"{layer.name}.{role}"] = np.asarray(arr)
    return fused_g, out


def _full(v, n):
    v = np.asarray(v, dtype=np.float64)
    return np.full(n, float(v)) if v.ndim == 0 else v


def _fused_param(layer, tensors, role):
    try:
        return np.asarray(tensors[layer.params[role]])
    except KeyError:
        raise GraphError(f"fused layer {layer.name!r} lacks its {role!r} tensor") from None


def fused_unit_from_layer(layer, tensors) -> FusedBinaryConvUnit:
    kind = "bit1" if layer.out_bits == 1 else "int4"
    words = _fused_param(layer, tensors, "weight_bits").astype(np.uint64)
    weight = PackedBitTensor(words, layer.C)
    if weight.shape != (layer.N, layer.K, layer.K, layer.C):
        raise ShapeError(f"layer {layer.name!r}: packed weight {weight.shape} does not match N, K, C")
    common = dict(weight=weight, out_kind=kind, stride=layer.stride, padding=layer.padding)
    if kind == "int4":
        return FusedBinaryConvUnit(requant_scale=_fused_param(layer, tensors, "requant_scale"),
                                   requant_offset=_fused_param(layer, tensors, "requant_offset"), **common)
    return FusedBinaryConvUnit(theta=_fused_param(layer, tensors, "theta"),
                               theta_int=_fused_param(layer, tensors, "theta_int"),
                               direction=_fused_param(layer, tensors, "direction"), **common)


def fused_sign_from_layer(layer, tensors) -> FusedSign:
    theta_int = _fused_param(layer, tensors, "theta_int") if "theta_int" in layer.params else None
    return FusedSign(_fused_param(layer, tensors, "theta"), theta_int,
                     _fused_param(layer, tensors, "direction"))
