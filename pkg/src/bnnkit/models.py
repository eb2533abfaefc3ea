"""Random training-form parameters for tests, demos and the verify command.

Units are drawn so their thresholds land inside (or just outside) the
accumulator range, which makes both output signs common. ``case`` pins the
sign of the fused scale tau' and of b1, the four regimes a threshold solver
has to get right. ``dyadic=True`` draws every parameter from small binary
fractions, so exact threshold ties occur and floating point stays exact.
All values are float32-representable so training containers store them losslessly.
"""

from __future__ import annotations

import itertools

import numpy as np

from .graphs import GraphSpec
from .refmodel import (
    OverParamConvUnit,
    SignUnit,
    TrainingBlock,
    UNIT_ROLES,
    is_binary_conv,
    output_kappa,
)

CASES = tuple(itertools.product((1, -1), (1, -1)))  # (sign of tau', sign of b1)


def _f32(v):
    return np.asarray(v, dtype=np.float32).astype(np.float64)


def _mag(rng, size, dyadic, lo=0.25, hi=2.0):
    if dyadic:
        return rng.choice([0.25, 0.5, 1.0, 2.0], size=size)
    return _f32(rng.uniform(lo, hi, size=size))


def _signs(rng, size):
    return rng.choice([-1.0, 1.0], size=size)


def _alpha(rng, shape, dyadic):
    n, c, k, _ = shape
    form = rng.integers(4)
    sub = [(), (n,), (n, c), (n, c, k, k)][form]
    return _signs(rng, sub) * _mag(rng, sub, dyadic, 0.1, 3.0)


def _weights(rng, shape, dyadic):
    if dyadic:
        w = rng.choice([-1.0, -0.5, 0.0, 0.5, 1.0], size=shape)
    else:
        w = _f32(rng.normal(size=shape))
        w[rng.random(shape) < 0.05] = 0.0  # exercise the zero-jitter path
    return w


def _threshold_target(rng, n, length, dyadic):
    if dyadic:
        # integers hit exact ties, halves sit between accumulator values
        return rng.integers(-length - 2, length + 3, size=n) / rng.choice([1.0, 2.0], size=n)
    return _f32(rng.uniform(-length - 2, length + 2, size=n))


def random_unit(rng, n, c, k, stride=1, out_kind="bit1", case=None, dyadic=False, kappa_in=1.0):
    """Draw a valid unit; for bit1 units ``case`` fixes (sign tau', sign b1)."""
    case = case or CASES[rng.integers(4)]
    shape = (n, c, k, k)
    length = c * k * k
    lam = _mag(rng, n, dyadic)
    gamma = _signs(rng, n) * _mag(rng, n, dyadic)
    kin = np.broadcast_to(np.asarray(kappa_in, np.float64), (n,))
    # choose tau so that sign(tau * gamma * kappa_in * lam) == case[0]
    tau = case[0] * np.sign(gamma) * np.sign(kin) * _mag(rng, n, dyadic)
    beta = _signs(rng, n) * _mag(rng, n, dyadic, 0.0, 2.0)
    slope = _mag(rng, n, dyadic, 0.05, 2.0)
    tau_f = tau * gamma * kin * lam
    if out_kind == "bit1":
        b1 = case[1] * _mag(rng, n, dyadic, 0.0, 3.0)
        if dyadic:
            b1 = np.where(rng.random(n) < 0.2, 0.0, b1)
        x_star = np.where(b1 <= 0, -b1, -b1 / slope)
        theta = _threshold_target(rng, n, length, dyadic)
        b0 = x_star - tau_f * theta - tau * beta
    else:
        b1 = np.zeros(n)
        # typical |y| is about sqrt(L); aim for a spread of a few INT4 steps
        gain = 3.0 / (np.abs(tau_f) * np.sqrt(length))
        tau = tau * (2.0 ** np.round(np.log2(gain)) if dyadic else gain)
        b0 = _f32(rng.uniform(-2, 2, size=n)) if not dyadic else rng.integers(-4, 5, size=n) / 2.0
        b0 = b0 - tau * beta
    return OverParamConvUnit(
        weight=_weights(rng, shape, dyadic), alpha_w=_alpha(rng, shape, dyadic), lam=lam,
        kappa=_mag(rng, (), dyadic), bn_gamma=gamma, bn_beta=beta, tau=_f32(tau), b0=_f32(b0),
        b1=_f32(b1), prelu_slope=slope, stride=stride, out_kind=out_kind,
    )


def random_sign_unit(rng, n, case=None, dyadic=False) -> SignUnit:
    """Binarizer for an INT4 sum; thresholds fall in [-9, 8]."""
    case = case or CASES[rng.integers(4)]
    gamma = _signs(rng, n) * _mag(rng, n, dyadic)
    tau = case[0] * np.sign(gamma) * _mag(rng, n, dyadic)
    beta = _signs(rng, n) * _mag(rng, n, dyadic, 0.0, 2.0)
    slope = _mag(rng, n, dyadic, 0.05, 2.0)
    b1 = case[1] * _mag(rng, n, dyadic, 0.0, 3.0)
    x_star = np.where(b1 <= 0, -b1, -b1 / slope)
    theta = _threshold_target(rng, n, 8, dyadic)
    b0 = x_star - tau * gamma * theta - tau * beta
    return SignUnit(bn_gamma=gamma, bn_beta=beta, tau=_f32(tau), b0=_f32(b0), b1=_f32(b1),
                    prelu_slope=slope, kappa=_mag(rng, (), dyadic))


def random_block(rng, cin, cout, stride=1, skip_kernel=3, dyadic=False, kappa_in=1.0) -> TrainingBlock:
    conv1 = random_unit(rng, cout, cin, 3, stride, "bit1", dyadic=dyadic, kappa_in=kappa_in)
    conv2 = random_unit(rng, cout, cout, 3, 1, "int4", dyadic=dyadic, kappa_in=conv1.kappa)
    skip = random_unit(rng, cout, cin, skip_kernel, stride, "int4", dyadic=dyadic, kappa_in=kappa_in)
    return TrainingBlock(conv1, conv2, skip, random_sign_unit(rng, cout, dyadic=dyadic))


def random_signs(rng, shape) -> np.ndarray:
    return rng.choice(np.array([-1, 1], np.int8), size=shape)


# -- graph parameters ----------------------------------------------------------


def unit_params(unit: OverParamConvUnit) -> dict:
    out = {"weight": unit.weight}
    out.update({r: np.asarray(getattr(unit, r), np.float64) for r in UNIT_ROLES})
    return out


def sign_params(unit: SignUnit) -> dict:
    return {r: np.asarray(getattr(unit, r), np.float64)
            for r in ("bn_gamma", "bn_beta", "tau", "b0", "b1", "prelu_slope", "kappa")}


def attach(layer, tensors, params: dict):
    layer.params = {role: f"{layer.name}.{role}" for role in params}
    for role, v in params.items():
        tensors[f"{layer.name}.{role}"] = np.asarray(v)


def init_training_tensors(g: GraphSpec, rng, dyadic=False) -> dict:
    """Give every layer of ``g`` random training-form parameters (in place)."""
    tensors: dict[str, np.ndarray] = {}
    for layer in g.layers:
        if is_binary_conv(layer):
            kappa_in = output_kappa(g, tensors, g.producers(layer.name)[0])
            unit = random_unit(rng, layer.N, layer.C, layer.K, layer.stride,
                               "bit1" if layer.out_bits == 1 else "int4", dyadic=dyadic, kappa_in=kappa_in)
            attach(layer, tensors, unit_params(unit))
        elif layer.op == "sign":
            attach(layer, tensors, sign_params(random_sign_unit(rng, layer.N, dyadic=dyadic)))
        elif layer.op == "conv":
            fan_in = layer.C * layer.K * layer.K
            attach(layer, tensors, {"weight": _f32(rng.normal(size=(layer.N, layer.C, layer.K, layer.K))
                                                   / np.sqrt(fan_in)),
                                    "bias": _f32(rng.normal(scale=0.1, size=layer.N))})
        elif layer.op == "bn" and layer.in_bits >= 8:
            attach(layer, tensors, {"gamma": _mag(rng, layer.N, dyadic), "beta": _f32(rng.normal(size=layer.N))})
        else:
            layer.params = {}
    return tensors


__all__ = [
    "CASES", "random_unit", "random_sign_unit", "random_block", "random_signs",
    "unit_params", "sign_params", "attach", "init_training_tensors",
]
