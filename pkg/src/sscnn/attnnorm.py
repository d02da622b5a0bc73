"""Attention-based normalisation blocks and component extrapolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .selection import SelectionMap

DEFAULT_EPS = 1e-5


@dataclass
class ComponentTriple:
    """Output of one AttnNorm block.

    ``mu``, ``sigma`` and ``residual`` share the input's ``(..., N, T_in, d)``
    shape; ``mu_hat`` and ``residual_hat`` are ``(..., N, T_out, d)`` once
    :func:`extrapolate` has run.
    """

    mu: Tensor
    sigma: Tensor
    residual: Tensor
    mu_hat: Tensor | None = None
    residual_hat: Tensor | None = None

    def reconstruct(self) -> np.ndarray:
        return self.mu.value + self.sigma.value * self.residual.value


def _normalise(h: Tensor, mu: Tensor, second: Tensor, eps: float) -> ComponentTriple:
    var = second - mu * mu + eps
    # row-stochastic maps make var >= eps by Jensen; rounding can nibble at it
    if not np.all(var.value > 0):
        raise FloatingPointError("AttnNorm variance is not positive")
    sigma = nc.sqrt(var)
    return ComponentTriple(mu=mu, sigma=sigma, residual=(h - mu) / sigma)


def attn_norm_temporal(h, selection: SelectionMap, eps: float = DEFAULT_EPS) -> ComponentTriple:
    """Per-series, per-channel normalisation along the step axis.

    ``mu = I h``, ``sigma^2 = I h^2 - mu^2 + eps``, ``R = (h - mu) / sigma``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    h = nc.as_tensor(h)
    t = h.shape[-2]
    if selection.shape != (t, t):
        raise ValueError(f"temporal map {selection.shape} does not match {t} steps")
    imap = selection.entries
    return _normalise(h, nc.matmul(imap, h), nc.matmul(imap, h * h), eps)


def attn_norm_spatial(h, selection: SelectionMap, eps: float = DEFAULT_EPS) -> ComponentTriple:
    """Same formulas applied across series for every (step, channel) frame.

    ``selection.entries`` is ``(..., N, N)`` with the same leading dims as ``h``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    h = nc.as_tensor(h)
    n, t, d = h.shape[-3:]
    if selection.shape != (n, n):
        raise ValueError(f"spatial map {selection.shape} does not match {n} series")
    flat = nc.reshape(h, h.shape[:-3] + (n, t * d))
    imap = selection.entries
    mu = nc.reshape(nc.matmul(imap, flat), h.shape)
    second = nc.reshape(nc.matmul(imap, flat * flat), h.shape)
    return _normalise(h, mu, second, eps)


def extrapolate(triple: ComponentTriple, extrapolation: SelectionMap) -> ComponentTriple:
    t_in = triple.mu.shape[-2]
    if extrapolation.shape[-1] != t_in:
        raise ValueError(f"extrapolation map {extrapolation.shape} does not match {t_in} steps")
    emap = extrapolation.entries
    triple.mu_hat = nc.matmul(emap, triple.mu)
    triple.residual_hat = nc.matmul(emap, triple.residual)
    return triple


def extrapolate_spatial_zero(t_out: int, shape: tuple[int, ...]) -> tuple[Tensor, Tensor]:
    """Zero forecasts for the spatial component; ``shape`` is the input's shape."""
    out_shape = tuple(shape[:-2]) + (t_out, shape[-1])
    return Tensor(np.zeros(out_shape)), Tensor(np.zeros(out_shape))
