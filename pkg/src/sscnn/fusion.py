"""Polynomial-regression fusion of component and residual channels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .attnnorm import ComponentTriple

N_SLOTS = 8


@dataclass
class FusionParams:
    conv_a: Tensor  # (k, 8d, d)
    bias_a: Tensor
    conv_b: Tensor  # (k, 8d, d)
    bias_b: Tensor
    conv_mix: Tensor  # (1, d, d)
    bias_mix: Tensor

    @property
    def kernel_size(self) -> int:
        return self.conv_a.shape[0]

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("conv_a", self.conv_a), ("bias_a", self.bias_a),
                ("conv_b", self.conv_b), ("bias_b", self.bias_b),
                ("conv_mix", self.conv_mix), ("bias_mix", self.bias_mix)]

    @staticmethod
    def count(channels: int, kernel: int) -> int:
        d = channels
        return 2 * kernel * N_SLOTS * d * d + d * d + 3 * d

    @classmethod
    def zeros(cls, channels: int, kernel: int) -> "FusionParams":
        d = channels
        return cls(*(Tensor(np.zeros(s), requires_grad=True) for s in
                     [(kernel, N_SLOTS * d, d), (d,), (kernel, N_SLOTS * d, d), (d,), (1, d, d), (d,)]))

    @classmethod
    def init(cls, channels: int, kernel: int, rng: np.random.Generator) -> "FusionParams":
        d = channels
        fan_in = kernel * N_SLOTS * d
        p = cls.zeros(channels, kernel)
        p.conv_a.value[...] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), p.conv_a.shape)
        p.conv_b.value[...] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), p.conv_b.shape)
        p.conv_mix.value[...] = rng.normal(0.0, 1.0 / np.sqrt(d), p.conv_mix.shape)
        return p


def concat_components(triples: list[ComponentTriple], forecast: bool = False) -> Tensor:
    """Stack ``[R, mu]`` of the long-term, seasonal, short-term and spatial blocks.

    With ``forecast=True`` the extrapolated ``residual_hat``/``mu_hat`` pairs are
    used instead.
    """
    if len(triples) != N_SLOTS // 2:
        raise ValueError(f"expected {N_SLOTS // 2} component triples, got {len(triples)}")
    parts = []
    for t in triples:
        pair = (t.residual_hat, t.mu_hat) if forecast else (t.residual, t.mu)
        parts.extend(pair)
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ValueError(f"component shapes differ: {sorted(shapes)}")
    return nc.concat(parts, axis=-1)


def polynomial_regression(s, p: FusionParams) -> Tensor:
    """``mix(conv_a(S) * conv_b(S)) + conv_a(S)`` with causal kernels."""
    s = nc.as_tensor(s)
    if s.shape[-1] != p.conv_a.shape[1]:
        raise ValueError(f"fusion input has {s.shape[-1]} channels, expected {p.conv_a.shape[1]}")
    a = nc.causal_conv1d(s, p.conv_a, p.bias_a)
    b = nc.causal_conv1d(s, p.conv_b, p.bias_b)
    return nc.causal_conv1d(a * b, p.conv_mix, p.bias_mix) + a
