"""Deterministic series transforms applied to loaded panels.

All transforms are pure: they return new arrays / new panels and never
mutate loaded data.  Per-unit transforms (growth rates, rolling means,
trend/gap splits) operate on each unit's time-ordered series separately.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Mapping, Sequence

import numpy as np
from scipy.linalg import solveh_banded

from .errors import DimensionError, DomainError, SchemaError
from .panel import NumericColumn, PanelDataset

KINDS = ("log_shift", "growth_rate", "rolling_geometric_mean", "hp_gap")


@dataclass(frozen=True)
class TransformRecipe:
    kind: str
    source_column: str
    target_column: str
    shift: float | None = None      # log_shift
    window: int | None = None       # rolling_geometric_mean
    smoothing: float | None = None  # hp_gap lambda

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown transform kind {self.kind!r}")
        if self.kind == "log_shift" and self.shift is None:
            raise SchemaError("log_shift requires an explicit shift constant")
        if self.kind == "rolling_geometric_mean":
            if self.window is None or self.window < 1:
                raise SchemaError("rolling_geometric_mean requires window >= 1")
        if self.kind == "hp_gap":
            if self.smoothing is None or self.smoothing < 0:
                raise SchemaError("hp_gap requires smoothing lambda >= 0")


def read_recipes(source: str | Path | IO | Sequence[Mapping]) -> list[TransformRecipe]:
    """Parse a JSON list of transform recipes."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    elif hasattr(source, "read"):
        raw = json.load(source)
    else:
        raw = source
    if not isinstance(raw, list):
        raise SchemaError("transform config must be a JSON list of recipes")
    out = []
    for entry in raw:
        try:
            out.append(
                TransformRecipe(
                    kind=entry["kind"],
                    source_column=entry["source"],
                    target_column=entry["target"],
                    shift=entry.get("shift"),
                    window=entry.get("window"),
                    smoothing=entry.get("lambda"),
                )
            )
        except (TypeError, KeyError) as exc:
            raise SchemaError(f"bad transform recipe {entry!r}: {exc}") from None
    return out


def log_shift(series: np.ndarray, shift: float) -> np.ndarray:
    """Elementwise ln(x + shift); requires min(x) + shift >= 1 so the log
    stays away from its pole."""
    x = np.asarray(series, dtype=float)
    shifted = x + shift
    if np.nanmin(shifted) < 1.0 - 1e-12:
        raise DomainError(
            f"log_shift needs min(series) + shift >= 1, got {np.nanmin(shifted):.6g}"
        )
    return np.log(shifted)


def growth_rate(series: np.ndarray) -> np.ndarray:
    """Percent change 100 * (x_t - x_{t-1}) / x_{t-1}; the first entry is
    NaN, zero denominators yield NaN (flagged by the caller)."""
    x = np.asarray(series, dtype=float)
    out = np.full_like(x, np.nan)
    prev = x[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        out[1:] = 100.0 * (x[1:] - prev) / prev
    out[1:][prev == 0.0] = np.nan
    return out


def rolling_geometric_mean(series: np.ndarray, window: int) -> np.ndarray:
    """Geometric mean of growth factors (1 + x/100) over a trailing window,
    returned on the percent scale; the first window-1 entries are NaN."""
    x = np.asarray(series, dtype=float)
    if window < 1:
        raise DimensionError(f"window must be >= 1, got {window}")
    if window > x.size:
        raise DimensionError(f"window {window} longer than series of length {x.size}")
    out = np.full_like(x, np.nan)
    factors = 1.0 + x / 100.0
    for t in range(window - 1, x.size):
        prod = np.prod(factors[t - window + 1 : t + 1])
        out[t] = np.nan if prod <= 0 else 100.0 * (prod ** (1.0 / window) - 1.0)
    return out


def hp_gap(series: np.ndarray, smoothing: float) -> tuple[np.ndarray, np.ndarray]:
    """Trend/gap split: trend minimizes sum (y-tau)^2 + lambda sum (d2 tau)^2,
    solved exactly through the pentadiagonal normal equations
    (I + lambda D'D) tau = y; gap = y - trend."""
    y = np.asarray(series, dtype=float)
    if y.size < 4:
        raise DimensionError(f"hp_gap needs a series of length >= 4, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise DomainError("hp_gap input must be finite")
    if smoothing < 0:
        raise DomainError(f"smoothing lambda must be >= 0, got {smoothing}")
    n = y.size
    lam = float(smoothing)
    # Upper banded storage of I + lam * D'D (symmetric, bandwidth 2):
    # D'D has diagonal [1, 5, 6, ..., 6, 5, 1], first off-diagonal
    # [-2, -4, ..., -4, -2] and second off-diagonal all ones.
    diag = np.full(n, 6.0)
    diag[[0, -1]] = 1.0
    diag[[1, -2]] = 5.0
    off1 = np.full(n - 1, -4.0)
    off1[[0, -1]] = -2.0
    ab = np.zeros((3, n))
    ab[0, 2:] = lam
    ab[1, 1:] = lam * off1
    ab[2] = 1.0 + lam * diag
    trend = solveh_banded(ab, y)
    return trend, y - trend


def derive_series(recipe: TransformRecipe, panel: PanelDataset) -> PanelDataset:
    """Apply a recipe per unit and return a panel extended with the derived
    column(s).

    Entries undefined at the start of each unit's series (growth rates,
    rolling means) are trimmed from every column so the grid stays
    rectangular.  hp_gap adds both the gap (target) and the trend
    (target + '_trend').
    """
    src = panel.numeric(recipe.source_column)
    if np.isnan(src).any():
        raise DomainError(
            f"source column {recipe.source_column!r} has missing cells; "
            "derive on complete columns only"
        )
    n_units, n_times = panel.n_units, panel.n_times
    per_unit = src.reshape(n_units, n_times)

    if recipe.kind == "log_shift":
        values = log_shift(src, recipe.shift)
        return panel.with_column(NumericColumn(recipe.target_column, values))

    if recipe.kind == "hp_gap":
        trend = np.empty_like(per_unit)
        gap = np.empty_like(per_unit)
        for i in range(n_units):
            trend[i], gap[i] = hp_gap(per_unit[i], recipe.smoothing)
        out = panel.with_column(NumericColumn(recipe.target_column, gap.ravel()))
        return out.with_column(
            NumericColumn(recipe.target_column + "_trend", trend.ravel())
        )

    if recipe.kind == "growth_rate":
        derived = np.stack([growth_rate(per_unit[i]) for i in range(n_units)])
        n_drop = 1
    else:  # rolling_geometric_mean
        if recipe.window > n_times:
            raise DimensionError(
                f"window {recipe.window} longer than the panel's {n_times} time points"
            )
        derived = np.stack(
            [rolling_geometric_mean(per_unit[i], recipe.window) for i in range(n_units)]
        )
        n_drop = recipe.window - 1

    kept = derived[:, n_drop:]
    n_bad = int(np.isnan(kept).sum())
    if n_bad:
        warnings.warn(
            f"{recipe.target_column}: {n_bad} undefined cells (zero denominators) "
            "kept as missing",
            stacklevel=2,
        )
    trimmed = panel.drop_leading_times(n_drop)
    return trimmed.with_column(
        NumericColumn(recipe.target_column, kept.ravel()), missing=n_bad
    )
