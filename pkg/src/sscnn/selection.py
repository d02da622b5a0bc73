"""Inference and extrapolation maps for the structured components.

Each builder returns a :class:`SelectionMap` whose entries are a
:class:`~sscnn.numcore.Tensor`, so gradients reach the logits it was built
from.  Maps are materialised densely together with a boolean support mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .numcore import Tensor, as_tensor, gather, masked_row_softmax, matmul, swapaxes, reshape


class MapKind(str, Enum):
    LONG_TERM = "long_term"
    LONG_TERM_EXTRAPOLATION = "long_term_extrapolation"
    SEASONAL = "seasonal"
    SEASONAL_EXTRAPOLATION = "seasonal_extrapolation"
    SHORT_TERM = "short_term"
    SHORT_TERM_EXTRAPOLATION = "short_term_extrapolation"
    SPATIAL = "spatial"


@dataclass
class SelectionMap:
    kind: MapKind
    entries: Tensor
    support: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape[-2:]

    def row_sums(self) -> np.ndarray:
        return self.entries.value.sum(axis=-1)

    def supported_rows(self) -> np.ndarray:
        return self.support.any(axis=-1)


@dataclass
class SeasonalParams:
    """Inter-cycle logits for the seasonal maps.

    ``w_in`` is ``tau_in x tau_in`` and ``w_out`` is ``tau_out x tau_in`` with
    ``tau_in = t_in / cycle`` and ``tau_out = ceil(t_out / cycle)``.
    """

    w_in: Tensor
    w_out: Tensor
    cycle: int


@dataclass
class ShortTermParams:
    w_in: Tensor  # (delta,) lag logits
    w_out: Tensor  # (delta, delta) horizon x history logits
    delta: int


def cycle_counts(t_in: int, t_out: int, cycle: int) -> tuple[int, int]:
    if cycle < 1 or t_in % cycle:
        raise ValueError(f"t_in={t_in} must be a positive multiple of cycle={cycle}")
    return t_in // cycle, -(-t_out // cycle)


def build_long_term_maps(t_in: int, t_out: int) -> tuple[SelectionMap, SelectionMap]:
    if t_in < 1 or t_out < 1:
        raise ValueError("t_in and t_out must be >= 1")
    inf = SelectionMap(MapKind.LONG_TERM, Tensor(np.full((t_in, t_in), 1.0 / t_in)),
                       np.ones((t_in, t_in), dtype=bool))
    ext = SelectionMap(MapKind.LONG_TERM_EXTRAPOLATION, Tensor(np.full((t_out, t_in), 1.0 / t_in)),
                       np.ones((t_out, t_in), dtype=bool))
    return inf, ext


def _phase_index(rows: int, t_in: int, cycle: int, tau_in: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(rows)[:, None]
    j = np.arange(t_in)[None, :]
    support = (i % cycle) == (j % cycle)
    index = np.where(support, (i // cycle) * tau_in + j // cycle, -1)
    return index, support


def build_seasonal_inference(p: SeasonalParams, t_in: int) -> SelectionMap:
    tau_in = t_in // p.cycle
    if t_in % p.cycle or p.w_in.shape != (tau_in, tau_in):
        raise ValueError(f"seasonal logits {p.w_in.shape} do not fit t_in={t_in}, cycle={p.cycle}")
    weights = masked_row_softmax(p.w_in)
    index, support = _phase_index(t_in, t_in, p.cycle, tau_in)
    return SelectionMap(MapKind.SEASONAL, gather(weights, index), support)


def build_seasonal_extrapolation(p: SeasonalParams, t_in: int, t_out: int) -> SelectionMap:
    tau_in, tau_out = cycle_counts(t_in, t_out, p.cycle)
    if p.w_out.shape != (tau_out, tau_in):
        raise ValueError(f"seasonal extrapolation logits {p.w_out.shape} != {(tau_out, tau_in)}")
    weights = masked_row_softmax(p.w_out)
    # forward step i sits at absolute position t_in + i, which shares its
    # phase with history step j iff i = j (mod cycle) because cycle | t_in
    index, support = _phase_index(t_out, t_in, p.cycle, tau_in)
    return SelectionMap(MapKind.SEASONAL_EXTRAPOLATION, gather(weights, index), support)


def build_short_term_inference(p: ShortTermParams, t_in: int) -> SelectionMap:
    """Row ``i`` averages lags ``0 <= i - j < delta`` (with ``j >= 0``).

    Rows near the start of the window only have ``i + 1`` lags available;
    their softmax is renormalised over those lags.
    """
    if not 1 <= p.delta <= t_in:
        raise ValueError(f"delta={p.delta} must lie in [1, t_in={t_in}]")
    lag = np.arange(t_in)[:, None] - np.arange(t_in)[None, :]
    support = (lag >= 0) & (lag < p.delta)
    logits = gather(p.w_in, np.where(support, lag, -1))
    return SelectionMap(MapKind.SHORT_TERM, masked_row_softmax(logits, support), support)


def build_short_term_extrapolation(p: ShortTermParams, t_in: int, t_out: int) -> SelectionMap:
    """Horizons ``i < delta`` read the last ``delta`` steps; later rows are zero."""
    if not 1 <= p.delta <= t_in:
        raise ValueError(f"delta={p.delta} must lie in [1, t_in={t_in}]")
    rows = min(p.delta, t_out)
    if p.w_out.shape != (p.delta, p.delta):
        raise ValueError(f"short-term extrapolation logits {p.w_out.shape} != {(p.delta, p.delta)}")
    weights = masked_row_softmax(gather(p.w_out, np.arange(rows * p.delta).reshape(rows, p.delta)))
    i = np.arange(t_out)[:, None]
    j = np.arange(t_in)[None, :]
    start = t_in - p.delta
    support = (i < p.delta) & (j >= start)
    index = np.where(support, i * p.delta + (j - start), -1)
    return SelectionMap(MapKind.SHORT_TERM_EXTRAPOLATION, gather(weights, index), support)


def build_spatial_inference(h, temperature: float = 1.0) -> SelectionMap:
    """Row softmax of inner products between vectorised series.

    ``h`` is ``(..., N, T, d)``; the result is ``(..., N, N)``.  The inner
    products are not scaled by the vector length.
    """
    h = as_tensor(h)
    n = h.shape[-3]
    flat = reshape(h, h.shape[:-3] + (n, h.shape[-2] * h.shape[-1]))
    gram = matmul(flat, swapaxes(flat, -1, -2))
    if temperature != 1.0:
        gram = gram * (1.0 / temperature)
    support = np.ones(gram.shape, dtype=bool)
    return SelectionMap(MapKind.SPATIAL, masked_row_softmax(gram), support)
