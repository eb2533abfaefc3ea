"""Floating-point forward pass of the over-parameterized training form.

This is the oracle the fused integer path is checked against, so it follows
the training equations literally (tanh weight binarization, BN, PReLU,
hard-tanh, sign) and shares no arithmetic with :mod:`bnnkit.fusion`.
Conventions shared with the fused path: Sign(0) = +1, and +-1 activations are
spatially padded with -1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bitpack import quantize_int4
from .errors import GraphError, InvalidParam, ShapeError
from .graphs import INPUT, topological_order

OUT_KINDS = ("bit1", "int4")


def sign(x) -> np.ndarray:
    return np.where(np.asarray(x) >= 0, 1, -1).astype(np.int8)


def jitter_zeros(w) -> np.ndarray:
    """Move exact zeros to +eps so Sign(alpha)*Sign(w) and Sign(tanh(alpha*w)) agree."""
    w = np.asarray(w, dtype=np.float64)
    return np.where(w == 0, np.finfo(np.float64).eps, w)


def _per_channel(v, n, name):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        return np.full(n, float(v))
    if v.shape != (n,):
        raise ShapeError(f"{name} has shape {v.shape}, expected ({n},)")
    return v


def broadcast_alpha(alpha, weight_shape) -> np.ndarray:
    """Reshape alpha (scalar, N, NxC or NxCxKxK) to broadcast against N x C x K x K weights."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 0:
        return alpha
    if alpha.shape != tuple(weight_shape[: alpha.ndim]):
        raise ShapeError(f"alpha shape {alpha.shape} does not prefix weight shape {weight_shape}")
    return alpha.reshape(alpha.shape + (1,) * (4 - alpha.ndim))


@dataclass
class OverParamConvUnit:
    """Training-form parameters of one binary conv plus its output quantizer.

    ``out_kind='bit1'`` binarizes with Sign(Htanh(PReLU(tau*BN(A) + b0) + b1)).
    ``out_kind='int4'`` fake-quantizes round(tau*BN(A) + b0) to INT4; b1 and
    the PReLU slope are unused. ``kappa`` is the scale the *output* activation
    stands for; the consumer's conv absorbs it.
    """

    weight: np.ndarray  # N x C x K x K
    alpha_w: np.ndarray | float = 1.0
    lam: np.ndarray | float = 1.0
    kappa: np.ndarray | float = 1.0
    bn_gamma: np.ndarray | float = 1.0
    bn_beta: np.ndarray | float = 0.0
    tau: np.ndarray | float = 1.0
    b0: np.ndarray | float = 0.0
    b1: np.ndarray | float = 0.0
    prelu_slope: np.ndarray | float = 0.25
    stride: int = 1
    padding: int | None = None
    out_kind: str = "bit1"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"weight must be N x C x K x K, got {self.weight.shape}")
        if self.out_kind not in OUT_KINDS:
            raise InvalidParam(f"unknown out_kind {self.out_kind!r}")
        n = self.n_out
        for name in ("lam", "bn_gamma", "bn_beta", "tau", "b0", "b1", "prelu_slope"):
            setattr(self, name, _per_channel(getattr(self, name), n, name))
        self.alpha_w = np.asarray(self.alpha_w, dtype=np.float64)
        broadcast_alpha(self.alpha_w, self.weight.shape)
        self.kappa = np.asarray(self.kappa, dtype=np.float64)
        if self.padding is None:
            self.padding = self.kernel // 2

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def check(self):
        """Raise InvalidParam unless the unit satisfies its invariants."""
        if np.any(self.alpha_w == 0):
            raise InvalidParam("alpha_w must be nonzero")
        if self.out_kind == "bit1" and np.any(self.prelu_slope <= 0):
            raise InvalidParam("PReLU slope must be positive")
        if np.any(self.tau == 0):
            raise InvalidParam("tau must be nonzero")


@dataclass
class SignUnit:
    """Activation binarizer without a conv; used on the INT4 residual sum."""

    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    tau: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    prelu_slope: np.ndarray
    kappa: np.ndarray | float = 1.0

    def __post_init__(self):
        n = np.atleast_1d(np.asarray(self.tau)).shape[0]
        for name in ("bn_gamma", "bn_beta", "tau", "b0", "b1", "prelu_slope"):
            setattr(self, name, _per_channel(getattr(self, name), n, name))
        self.kappa = np.asarray(self.kappa, dtype=np.float64)

    @classmethod
    def neutral(cls, n, **overrides):
        params = dict(bn_gamma=1.0, bn_beta=0.0, tau=1.0, b0=0.0, b1=0.0, prelu_slope=0.25)
        params.update(overrides)
        return cls(**{k: np.full(n, v) if np.ndim(v) == 0 else v for k, v in params.items()})

    @property
    def n_out(self) -> int:
        return self.tau.shape[0]


def ref_binarize_weight(weight, alpha_w, lam):
    """W_b = Sign(tanh(alpha * W_f)); W_approx = lam * W_b per output channel."""
    weight = np.asarray(weight, dtype=np.float64)
    alpha = broadcast_alpha(alpha_w, weight.shape)
    if np.any(alpha == 0):
        raise InvalidParam("alpha_w must be nonzero")
    w_b = sign(np.tanh(alpha * weight))
    lam = _per_channel(lam, weight.shape[0], "lam")
    return w_b, lam.reshape(-1, 1, 1, 1) * w_b


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def ref_conv(weight, x, stride=1, padding=0, pad_value=0.0) -> np.ndarray:
    """Cross-correlation of NHWC ``x`` with N x C x K x K ``weight``."""
    weight = np.asarray(weight, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"cannot convolve input {x.shape} with weight {weight.shape}")
    k = weight.shape[2]
    b, h, w, _ = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)),
                constant_values=pad_value)
    out = np.zeros((b, ho, wo, weight.shape[0]))
    for i in range(k):
        for j in range(k):
            patch = xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            out += patch @ weight[:, :, i, j].T
    return out


def _pre_sign(a_f, unit):
    bn = unit.bn_gamma * a_f + unit.bn_beta
    x = unit.tau * bn + unit.b0
    return np.where(x > 0, x, unit.prelu_slope * x) + unit.b1


def ref_binarize_activation(a_f, unit) -> np.ndarray:
    """Sign(Htanh(PReLU(tau * BN(A_f) + b0) + b1)) along the channel (last) axis."""
    return sign(np.clip(_pre_sign(np.asarray(a_f, dtype=np.float64), unit), -1.0, 1.0))


def ref_int4_activation(a_f, unit) -> np.ndarray:
    """Fake-quant an INT4-output unit: round(tau * BN(A_f) + b0), saturated."""
    v = unit.tau * (unit.bn_gamma * np.asarray(a_f, dtype=np.float64) + unit.bn_beta) + unit.b0
    return quantize_int4(v)


def ref_unit_forward(unit: OverParamConvUnit, x, kappa_in=1.0) -> np.ndarray:
    """Run one training-form unit on a +-1 input whose activations stand for kappa_in * x."""
    _, w_approx = ref_binarize_weight(jitter_zeros(unit.weight), unit.alpha_w, unit.lam)
    kappa_in = np.asarray(kappa_in, dtype=np.float64)
    if kappa_in.ndim == 0:
        a_f = ref_conv(w_approx, kappa_in * np.asarray(x, np.float64), unit.stride,
                       unit.padding, pad_value=-float(kappa_in))
    else:
        # per-output-channel incoming scale factors out of the sum
        a_f = _per_channel(kappa_in, unit.n_out, "kappa_in") * ref_conv(
            w_approx, x, unit.stride, unit.padding, pad_value=-1.0)
    if unit.out_kind == "int4":
        return ref_int4_activation(a_f, unit)
    return ref_binarize_activation(a_f, unit)


@dataclass
class TrainingBlock:
    """Training-form BiNeal block: conv1 (1-bit out), conv2 and skip (INT4 out), final sign."""

    conv1: OverParamConvUnit
    conv2: OverParamConvUnit
    skip: OverParamConvUnit
    final: SignUnit = field(default=None)

    def __post_init__(self):
        if self.conv1.out_kind != "bit1":
            raise InvalidParam("conv1 must produce 1-bit activations")
        if self.conv2.out_kind != "int4" or self.skip.out_kind != "int4":
            raise InvalidParam("conv2 and skip must produce INT4")
        if self.final is None:
            self.final = SignUnit.neutral(self.conv2.n_out)

    @property
    def stride(self) -> int:
        return self.conv1.stride


def saturating_add_int4(a, b) -> np.ndarray:
    return np.clip(a.astype(np.int16) + b.astype(np.int16), -8, 7).astype(np.int8)


def ref_block_forward(block: TrainingBlock, x, kappa_in=1.0) -> np.ndarray:
    a1 = ref_unit_forward(block.conv1, x, kappa_in)
    q2 = ref_unit_forward(block.conv2, a1, block.conv1.kappa)
    qs = ref_unit_forward(block.skip, x, kappa_in)
    s = saturating_add_int4(q2, qs)
    return ref_binarize_activation(s.astype(np.float64), block.final)


# -- graphs -----------------------------------------------------------------

UNIT_ROLES = ("alpha_w", "lam", "kappa", "bn_gamma", "bn_beta", "tau", "b0", "b1", "prelu_slope")
SIGN_ROLES = ("bn_gamma", "bn_beta", "tau", "b0", "b1", "prelu_slope", "kappa")


def _param(layer, tensors, role, default=None):
    name = layer.params.get(role)
    if name is None:
        if default is None:
            raise InvalidParam(f"layer {layer.name!r} has no {role!r} parameter")
        return default
    if name not in tensors:
        raise InvalidParam(f"layer {layer.name!r}: tensor {name!r} not found")
    return np.asarray(tensors[name])


def is_binary_conv(layer) -> bool:
    return layer.op == "conv" and layer.in_bits == 1


def unit_from_params(layer, tensors) -> OverParamConvUnit:
    """Build the training-form unit of a binary conv layer; missing roles are neutral."""
    if layer.out_bits not in (1, 4):
        raise InvalidParam(f"binary conv {layer.name!r} must output 1 or 4 bits")
    kw = {r: _param(layer, tensors, r, np.float64(OverParamConvUnit.__dataclass_fields__[r].default))
          for r in UNIT_ROLES}
    unit = OverParamConvUnit(weight=_param(layer, tensors, "weight"), stride=layer.stride,
                             padding=layer.padding, out_kind="bit1" if layer.out_bits == 1 else "int4", **kw)
    if unit.n_out != layer.N or unit.n_in != layer.C or unit.kernel != layer.K:
        raise ShapeError(f"layer {layer.name!r}: weight {unit.weight.shape} does not match N, C, K")
    return unit


def sign_from_params(layer, tensors) -> SignUnit:
    neutral = dict(bn_gamma=1.0, bn_beta=0.0, tau=1.0, b0=0.0, b1=0.0, prelu_slope=0.25, kappa=1.0)
    kw = {r: _param(layer, tensors, r, np.full(layer.N, neutral[r]) if r != "kappa" else np.float64(1.0))
          for r in SIGN_ROLES}
    return SignUnit(**kw)


def output_kappa(g, tensors, name):
    """Scale that the 1-bit activations produced by ``name`` stand for."""
    if name == INPUT:
        return np.asarray(g.metadata.get("input_kappa", 1.0), dtype=np.float64)
    layer = g.layer(name)
    if is_binary_conv(layer) or layer.op == "sign":
        return np.asarray(_param(layer, tensors, "kappa", np.float64(1.0)), dtype=np.float64)
    if layer.op == "pool" and layer.in_bits == 1 and layer.out_bits == 1:
        kappa = output_kappa(g, tensors, g.producers(name)[0])
        if kappa.ndim or kappa <= 0:
            raise InvalidParam("max-pool of 1-bit activations needs a positive scalar kappa upstream")
        return kappa
    return np.float64(1.0)


def incoming_kappa(g, tensors, layer):
    return output_kappa(g, tensors, g.producers(layer.name)[0])


def ref_graph_forward(g, tensors, x) -> np.ndarray:
    """Training-form forward of a whole graph.

    1-bit values travel as +-1 int8, INT4 as int8, wider data as float64.
    Returns the value of the last unconsumed layer; an empty graph is the identity.
    """
    from . import realops  # realops builds on ref_conv

    values = {INPUT: np.asarray(x)}
    order = topological_order(g)
    for layer in order:
        ins = [values[p] for p in g.producers(layer.name)]
        a = ins[0]
        if is_binary_conv(layer):
            out = ref_unit_forward(unit_from_params(layer, tensors), a, incoming_kappa(g, tensors, layer))
        elif layer.op == "conv":
            out = realops.real_conv(a, _param(layer, tensors, "weight"),
                                    _param(layer, tensors, "bias", np.zeros(layer.N)), layer.stride)
        elif layer.op == "eltwise":
            if layer.in_bits == 4:
                out = saturating_add_int4(ins[0], ins[1])
            elif layer.in_bits >= 8:
                out = ins[0].astype(np.float64) + ins[1]
            else:
                raise InvalidParam("1-bit elementwise add is not defined")
        elif layer.op == "sign":
            out = ref_binarize_activation(a.astype(np.float64), sign_from_params(layer, tensors))
        else:
            out = _ref_misc(layer, tensors, a, realops)
        values[layer.name] = out
    if not order:
        return values[INPUT]
    return values[g.outputs()[-1]]


def _ref_misc(layer, tensors, a, realops):
    if layer.op == "pool":
        out = realops.pool(a, layer.K, layer.stride, (layer.H_out, layer.W_out),
                           layer.attrs.get("mode", "max"), bool(layer.attrs.get("global")))
        return out.astype(np.int8) if layer.out_bits == 1 else out
    if layer.op == "requant" and layer.out_bits >= 8:
        return a.astype(np.float64)
    if layer.in_bits >= 8:
        if layer.op == "bn":
            return realops.affine(a, _param(layer, tensors, "gamma", np.float64(1.0)),
                                  _param(layer, tensors, "beta", np.float64(0.0)))
        if layer.op == "scale":
            return realops.affine(a, _param(layer, tensors, "scale", np.float64(1.0)))
        if layer.op == "relu":
            return realops.relu(a)
        if layer.op == "prelu":
            return realops.prelu(a, _param(layer, tensors, "slope", np.float64(0.25)))
    raise GraphError(f"layer {layer.name!r}: op {layer.op!r} on {layer.in_bits}-bit data is not executable")
