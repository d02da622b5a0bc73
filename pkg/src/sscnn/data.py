"""CSV ingestion, z-score normalisation and sliding windows."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-8
DEFAULT_SPLIT = (0.7, 0.1, 0.2)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SeriesTable:
    """``values`` is ``(n_series, n_steps)``; ``timestamps`` are kept as labels."""

    names: tuple[str, ...]
    values: np.ndarray
    timestamps: tuple[str, ...] | None = None

    @property
    def n_series(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]


def load_csv(path, has_date_column: bool = True) -> SeriesTable:
    """Read a header + rows CSV.  The first column is a date label when
    ``has_date_column``; every other column must parse as a real number."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    first = 1 if has_date_column else 0
    names = tuple(h.strip() for h in header[first:])
    if not names:
        raise DataError(f"{path}: no value columns")
    if not body:
        raise DataError(f"{path}: no data rows")
    values = np.empty((len(body), len(names)))
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} fields, header has {len(header)}")
        for c, cell in enumerate(row[first:]):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {r}, column '{names[c]}': cannot parse {cell!r}") from None
            if not np.isfinite(v):
                raise DataError(f"{path}: row {r}, column '{names[c]}': non-finite value {cell!r}")
            values[r - 2, c] = v
    stamps = None
    if has_date_column:
        stamps = tuple(row[0] for row in body)
        try:
            keys = [float(s) for s in stamps]
        except ValueError:
            keys = list(stamps)  # ISO-8601 labels sort lexically
        bad = next((i for i in range(1, len(keys)) if not keys[i] > keys[i - 1]), None)
        if bad is not None:
            raise DataError(f"{path}: timestamps not strictly increasing at row {bad + 2}")
    return SeriesTable(names, np.ascontiguousarray(values.T), stamps)


def write_csv(path, table: SeriesTable) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        stamps = table.timestamps or tuple(str(i) for i in range(table.n_steps))
        w.writerow(["date", *table.names])
        for t in range(table.n_steps):
            w.writerow([stamps[t], *(repr(float(v)) for v in table.values[:, t])])


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    floored: list[int] = field(default_factory=list)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Normalise an array whose series axis is ``-2`` (``(..., N, T)``)."""
        return (x - self.mean[:, None]) / self.std[:, None]

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std[:, None] + self.mean[:, None]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "floored": self.floored}

    @classmethod
    def from_dict(cls, doc: dict) -> "Normalizer":
        return cls(np.array(doc["mean"], dtype=float), np.array(doc["std"], dtype=float),
                   list(doc.get("floored", [])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Normalizer":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_normalizer(train: np.ndarray) -> Normalizer:
    """Per-series mean and population std of a ``(N, T)`` train slice."""
    mean = train.mean(axis=1)
    std = train.std(axis=1)
    floored = [int(i) for i in np.flatnonzero(std < STD_FLOOR)]
    return Normalizer(mean, np.maximum(std, STD_FLOOR), floored)


@dataclass
class WindowSet:
    """Sliding windows over one chronological split.

    ``origins`` are absolute indices of the first input step.
    """

    values: np.ndarray  # (N, T_split) slice the windows view
    start: int  # absolute index of values[:, 0]
    t_in: int
    t_out: int

    def __len__(self) -> int:
        return max(self.values.shape[1] - self.t_in - self.t_out + 1, 0)

    @property
    def origins(self) -> np.ndarray:
        return self.start + np.arange(len(self))

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """Inputs ``(B, N, t_in)`` and targets ``(B, N, t_out)`` for window indices."""
        idx = np.atleast_1d(np.asarray(idx))
        span = np.arange(self.t_in + self.t_out)
        blocks = self.values[:, idx[:, None] + span[None, :]]  # (N, B, span)
        blocks = np.transpose(blocks, (1, 0, 2))
        return blocks[..., :self.t_in], blocks[..., self.t_in:]

    def all(self) -> tuple[np.ndarray, np.ndarray]:
        return self.batch(np.arange(len(self)))


def split_bounds(n_steps: int, split=DEFAULT_SPLIT) -> list[tuple[int, int]]:
    if len(split) != 3 or any(f < 0 for f in split) or abs(sum(split) - 1.0) > 1e-9:
        raise DataError(f"split fractions {split} must be three non-negative numbers summing to 1")
    n_train = int(round(n_steps * split[0]))
    n_val = int(round(n_steps * split[1]))
    return [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, n_steps)]


def make_windows(values: np.ndarray, t_in: int, t_out: int, split=DEFAULT_SPLIT,
                 require=(True, True, True)) -> tuple[WindowSet, WindowSet, WindowSet]:
    """Chronological train/val/test windows lying fully inside each split.

    ``values`` is ``(N, T_total)``.  A split marked in ``require`` that cannot
    hold one window raises :class:`DataError`.
    """
    values = np.asarray(values, dtype=np.float64)
    sets = []
    for name, (lo, hi), needed in zip(("train", "val", "test"), split_bounds(values.shape[1], split),
                                      require):
        ws = WindowSet(values[:, lo:hi], lo, t_in, t_out)
        if needed and len(ws) < 1:
            raise DataError(f"{name} split has {hi - lo} steps, fewer than t_in + t_out = "
                            f"{t_in + t_out}")
        sets.append(ws)
    return tuple(sets)


def synthetic_series(n_steps: int = 5000, n_series: int = 1, cycle: int = 24, slope: float = 0.002,
                     amplitude: float = 2.0, phi: float = 0.6, noise: float = 1.0,
                     seed: int = 0) -> np.ndarray:
    """Linear trend + sinusoid of period ``cycle`` + AR(1) noise, shape ``(n_series, n_steps)``."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps)
    out = np.empty((n_series, n_steps))
    for s in range(n_series):
        shift = rng.uniform(0, 2 * np.pi) if s else 0.0
        e = np.empty(n_steps)
        e[0] = rng.normal(0.0, noise / np.sqrt(1 - phi ** 2)) if abs(phi) < 1 else 0.0
        shocks = rng.normal(0.0, noise, n_steps)
        for i in range(1, n_steps):
            e[i] = phi * e[i - 1] + shocks[i]
        out[s] = slope * t + amplitude * np.sin(2 * np.pi * t / cycle + shift) + e
    return out


def synthetic_table(values: np.ndarray) -> SeriesTable:
    names = tuple(f"s{i}" for i in range(values.shape[0]))
    return SeriesTable(names, values, tuple(str(i) for i in range(values.shape[1])))
