"""Conditional (partial) correlation tools and decomposition property checks.

Controls are passed as an ``(n_obs, k)`` matrix ``Z``; an empty control set
(``None`` or ``k == 0``) reduces every statistic to its plain, uncentred form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STAGES = ("raw", "minus_lt", "minus_se", "minus_st")
CONTROL_LEVELS = ("lt", "se", "st")


class DegenerateCorrelation(ArithmeticError):
    """A residual has zero norm, so the correlation is undefined."""


def _controls(z, n: int) -> np.ndarray:
    if z is None:
        return np.empty((n, 0))
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] != n:
        raise ValueError(f"control set has {z.shape[0]} observations, series has {n}")
    return z


def least_squares_residual(y, z=None) -> tuple[np.ndarray, np.ndarray]:
    """Weights ``w`` minimising ``||y - Z w||^2`` (minimum-norm on rank deficiency)
    and the residual ``y - Z w``."""
    y = np.asarray(y, dtype=np.float64)
    z = _controls(z, y.size)
    if z.shape[1] == 0:
        return np.empty(0), y.copy()
    w, *_ = np.linalg.lstsq(z, y, rcond=None)
    return w, y - z @ w


def _is_zero(r: np.ndarray, ref: np.ndarray) -> bool:
    scale = max(float(np.sqrt(np.sum(ref * ref))), 1.0)
    return float(np.sqrt(np.sum(r * r))) <= 1e-12 * scale


def conditional_correlation(x, y, z=None) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"series shapes differ: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("need at least 2 observations")
    _, rx = least_squares_residual(x, z)
    _, ry = least_squares_residual(y, z)
    if _is_zero(rx, x) or _is_zero(ry, y):
        raise DegenerateCorrelation("residual of X or Y vanishes under the control set")
    rho = np.sum(rx * ry) / (np.sqrt(np.sum(rx * rx)) * np.sqrt(np.sum(ry * ry)))
    return float(np.clip(rho, -1.0, 1.0))


def conditional_autocorrelation(y, z=None, lag: int = 1) -> float:
    """Lag-``lag`` correlation of the control residuals.

    The denominator pairs the full residual energy with that of the lagged
    copy, ``sqrt(sum_i R_i^2) * sqrt(sum_{i>=lag} R_{i-lag}^2)``.
    """
    y = np.asarray(y, dtype=np.float64)
    if not 0 <= lag < y.size:
        raise ValueError(f"lag {lag} outside [0, {y.size})")
    _, r = least_squares_residual(y, z)
    if _is_zero(r, y) or _is_zero(r[:r.size - lag], y):
        raise DegenerateCorrelation("residual vanishes under the control set")
    if lag == 0:
        return 1.0
    num = np.sum(r[lag:] * r[:-lag])
    den = np.sqrt(np.sum(r * r)) * np.sqrt(np.sum(r[:-lag] ** 2))
    return float(np.clip(num / den, -1.0, 1.0))


# ---------------------------------------------------------------------------
# progressive component control


def _trailing_mean(x: np.ndarray, width: int) -> np.ndarray:
    """Mean of ``x[t - width + 1 : t + 1]``; NaN until the window is full."""
    out = np.full(x.shape, np.nan)
    if width <= x.size:
        cs = np.concatenate([[0.0], np.cumsum(x)])
        out[width - 1:] = (cs[width:] - cs[:-width]) / width
    return out


def _phase_mean(x: np.ndarray, cycle: int, n_cycles: int) -> np.ndarray:
    """Mean of ``x[t], x[t - c], ..., x[t - (n - 1) c]``; NaN until available."""
    out = np.full(x.shape, np.nan)
    first = cycle * (n_cycles - 1)
    if first < x.size:
        acc = np.zeros(x.size - first)
        for k in range(n_cycles):
            acc += x[first - k * cycle: x.size - k * cycle]
        out[first:] = acc / n_cycles
    return out


@dataclass
class ResidualStage:
    """One step of progressive control.

    ``residual`` is the stage output, ``mu``/``sigma`` the estimates removed
    from the stage input and ``component`` the contribution of this stage in
    the units of the original series.
    """

    label: str
    residual: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    component: np.ndarray


@dataclass
class StageReport:
    stages: list[ResidualStage]
    start: int  # index in the input series of the first retained step
    scale: np.ndarray = field(repr=False)  # accumulated sigma product of the last stage

    def reconstruct(self) -> np.ndarray:
        parts = sum(s.component for s in self.stages[1:])
        return parts + self.stages[-1].residual * self.scale


def _expanding_mean(x: np.ndarray) -> np.ndarray:
    return np.cumsum(x) / np.arange(1, x.size + 1)


def control_components(y, cycle: int, delta: int, long_window: int | None = None,
                       seasonal_cycles: int = 7, eps: float = 1e-5) -> StageReport:
    """Remove long-term, seasonal and short-term components in turn.

    Each stage estimates ``mu`` with a causal average that includes the
    current step: long-term uses the expanding mean of all steps so far (or
    the last ``long_window`` steps when given), seasonal the same phase in
    the last ``seasonal_cycles`` cycles, short-term the last ``delta`` steps.
    ``sigma^2`` is the matching second moment minus ``mu^2`` plus ``eps``
    and the stage passes ``(x - mu) / sigma`` on.  Output is trimmed to the
    steps where every stage is defined.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError("control_components works on one series at a time")
    if cycle < 1 or delta < 1 or seasonal_cycles < 1 or (long_window is not None and long_window < 1):
        raise ValueError("cycle, delta, seasonal_cycles and long_window must be >= 1")
    lt_warmup = 0 if long_window is None else long_window - 1
    warmup = lt_warmup + cycle * (seasonal_cycles - 1) + (delta - 1)
    if y.size < warmup + 2 * cycle:
        raise ValueError(f"series of length {y.size} is too short; need at least "
                         f"{warmup + 2 * cycle} steps")

    def norm(x, mean_fn):
        mu = mean_fn(x)
        var = mean_fn(x * x) - mu * mu + eps
        sigma = np.sqrt(np.maximum(var, eps))
        return mu, sigma, (x - mu) / sigma

    long_mean = _expanding_mean if long_window is None else (lambda x: _trailing_mean(x, long_window))
    estimators = [long_mean,
                  lambda x: _phase_mean(x, cycle, seasonal_cycles),
                  lambda x: _trailing_mean(x, delta)]
    # each estimator is undefined for its first few steps; drop them before the next stage
    offsets = [0, lt_warmup, cycle * (seasonal_cycles - 1), delta - 1]
    stages = [ResidualStage("raw", y, np.zeros_like(y), np.ones_like(y), np.zeros_like(y))]
    x, scale, start = y, np.ones_like(y), 0
    for label, fn, skip in zip(STAGES[1:], estimators, offsets[1:]):
        mu, sigma, x = norm(x, fn)
        start += skip
        mu, sigma, x, scale = mu[skip:], sigma[skip:], x[skip:], scale[skip:]
        stages.append(ResidualStage(label, x, mu, sigma, scale * mu))
        scale = scale * sigma
    trimmed = [ResidualStage(s.label, s.residual[warmup - k:], s.mu[warmup - k:],
                             s.sigma[warmup - k:], s.component[warmup - k:])
               for s, k in zip(stages, np.cumsum(offsets))]
    return StageReport(trimmed, warmup, scale)


def component_controls(y, cycle: int, delta: int, long_window: int | None = None,
                       levels=CONTROL_LEVELS) -> tuple[np.ndarray, int]:
    """Causal control columns for conditional statistics of ``y``.

    ``lt`` is the mean of the previous ``long_window`` steps, ``se`` the mean
    of the same phase over the previous ``long_window / cycle`` cycles, and
    ``st`` the ``delta`` preceding observations as separate columns (so the
    least-squares weights act as a per-lag selection).  An intercept is always
    included when any level is requested.  Returns ``(Z, start)`` where rows
    of ``Z`` line up with ``y[start:]``.
    """
    y = np.asarray(y, dtype=np.float64)
    long_window = long_window or 7 * cycle
    if long_window % cycle:
        raise ValueError("long_window must be a multiple of cycle")
    unknown = set(levels) - set(CONTROL_LEVELS)
    if unknown:
        raise ValueError(f"unknown control levels {sorted(unknown)}")
    n = y.size
    cols, start = [], 0
    if "lt" in levels:
        cols.append(np.r_[np.nan, _trailing_mean(y, long_window)[:-1]])
        start = max(start, long_window)
    if "se" in levels:
        n_cycles = long_window // cycle
        shifted = np.r_[np.full(cycle, np.nan), y[:-cycle]]
        cols.append(_phase_mean(shifted, cycle, n_cycles))
        start = max(start, cycle * n_cycles)
    if "st" in levels:
        for lag in range(1, delta + 1):
            cols.append(np.r_[np.full(lag, np.nan), y[:-lag]])
        start = max(start, delta)
    if start >= n - 1:
        raise ValueError(f"series of length {n} is too short for the requested controls")
    if not cols:
        return np.empty((n, 0)), 0
    z = np.column_stack([np.ones(n)] + cols)[start:]
    return z, start


def _prefixes(levels) -> list[tuple[str, ...]]:
    levels = tuple(levels)
    return [levels[:k] for k in range(len(levels) + 1)]


def progressive_autocorrelation(y, cycle: int, delta: int, lags, long_window: int | None = None,
                                levels=CONTROL_LEVELS) -> dict[str, dict[int, float | None]]:
    """Conditional auto-correlation per lag while adding the ``levels`` controls in turn.

    All levels are evaluated on the same steps so they are comparable.
    Degenerate statistics are reported as ``None``.
    """
    y = np.asarray(y, dtype=np.float64)
    _, start = component_controls(y, cycle, delta, long_window, levels)
    out = {}
    for levels in _prefixes(levels):
        name = "+".join(levels) if levels else "none"
        z, s = component_controls(y, cycle, delta, long_window, levels)
        z = z[start - s:] if levels else None
        row = {}
        for lag in lags:
            try:
                row[int(lag)] = conditional_autocorrelation(y[start:], z, int(lag))
            except DegenerateCorrelation:
                row[int(lag)] = None
        out[name] = row
    return out


def progressive_crosscorrelation(values, cycle: int, delta: int, long_window: int | None = None,
                                 levels=CONTROL_LEVELS) -> dict[str, np.ndarray]:
    """Pairwise conditional correlation of ``(N, T)`` series per control level.

    Each pair is conditioned on the union of both series' control columns.
    Degenerate pairs are NaN in the returned matrices.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    _, start = component_controls(values[0], cycle, delta, long_window, levels)
    out = {}
    for levels in _prefixes(levels):
        name = "+".join(levels) if levels else "none"
        ctrl = []
        for i in range(n):
            if levels:
                z, s = component_controls(values[i], cycle, delta, long_window, levels)
                ctrl.append(z[start - s:])
            else:
                ctrl.append(None)
        mat = np.eye(n)
        for i in range(n):
            for j in range(i + 1, n):
                z = None if not levels else np.column_stack([ctrl[i], ctrl[j][:, 1:]])
                try:
                    rho = conditional_correlation(values[i, start:], values[j, start:], z)
                except DegenerateCorrelation:
                    rho = np.nan
                mat[i, j] = mat[j, i] = rho
        out[name] = mat
    return out


# ---------------------------------------------------------------------------
# decomposition distance property


def decomposition_distances(a, b) -> tuple[float, float]:
    """Distances ``||D(x1) - D(x2)||`` and ``||D(x1) - D(x3)||`` with
    ``D(a + b) = (a, b)``, for triplets satisfying ``a1 = a2``, ``b2 = b3``,
    ``a1 != a3``.  ``a`` and ``b`` are ``(3, dim)`` (or length-3) arrays."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64).T).T.reshape(3, -1)
    b = np.atleast_2d(np.asarray(b, dtype=np.float64).T).T.reshape(3, -1)
    if not np.array_equal(a[0], a[1]) or not np.array_equal(b[1], b[2]):
        raise ValueError("triplet must satisfy a1 == a2 and b2 == b3")
    if np.array_equal(a[0], a[2]):
        raise ValueError("triplet must satisfy a1 != a3")
    d12 = np.sqrt(np.sum((a[0] - a[1]) ** 2) + np.sum((b[0] - b[1]) ** 2))
    d13 = np.sqrt(np.sum((a[0] - a[2]) ** 2) + np.sum((b[0] - b[2]) ** 2))
    return float(d12), float(d13)


@dataclass
class DistanceCheck:
    passed: bool
    trials: int
    stochastic: bool
    violations: int = 0  # decomposed-space violations
    raw_violations: int = 0  # same triplets compared on x = a + b
    mean_d12: float = 0.0
    mean_d13: float = 0.0
    mean_diff: float = 0.0
    se_diff: float = 0.0


def decomposition_distance_check(n_trials: int = 10_000, dim: int = 4, noise: bool = False,
                                 seed: int = 0, sigma_a: float = 1.0, sigma_b: float = 1.0
                                 ) -> DistanceCheck:
    """Monte Carlo check of the decomposition distance inequality.

    Deterministic mode draws component triplets directly and requires zero
    violations.  With ``noise`` each component is drawn from a Gaussian around
    per-step means (mixture weights ``lambda`` random per trial) and the
    mean-squared inequality must hold within three standard errors.
    """
    rng = np.random.default_rng(seed)
    d12 = np.empty(n_trials)
    d13 = np.empty(n_trials)
    raw = 0
    for t in range(n_trials):
        a1, a3 = rng.normal(size=dim), rng.normal(size=dim)
        while np.array_equal(a1, a3):
            a3 = rng.normal(size=dim)
        b1, b2 = rng.normal(size=dim), rng.normal(size=dim)
        if noise:
            lam = rng.uniform(0.1, 1.0, size=2)
            mu_a, mu_b = np.stack([a1, a1, a3]), np.stack([b1, b2, b2])
            a = lam[0] * (mu_a + sigma_a * rng.normal(size=(3, dim)))
            b = lam[1] * (mu_b + sigma_b * rng.normal(size=(3, dim)))
            d12[t] = np.sum((a[0] - a[1]) ** 2) + np.sum((b[0] - b[1]) ** 2)
            d13[t] = np.sum((a[0] - a[2]) ** 2) + np.sum((b[0] - b[2]) ** 2)
            x = a + b
        else:
            a, b = np.stack([a1, a1, a3]), np.stack([b1, b2, b2])
            d12[t], d13[t] = decomposition_distances(a, b)
            x = a + b
        raw += np.linalg.norm(x[0] - x[1]) > np.linalg.norm(x[0] - x[2])
    diff = d12 - d13
    se = float(diff.std(ddof=1) / np.sqrt(n_trials)) if n_trials > 1 else 0.0
    if noise:
        violations = int(np.sum(diff > 0))
        passed = float(diff.mean()) <= 3 * se
    else:
        violations = int(np.sum(diff > 1e-12))
        passed = violations == 0
    return DistanceCheck(passed, n_trials, noise, violations, int(raw), float(d12.mean()),
                         float(d13.mean()), float(diff.mean()), se)
