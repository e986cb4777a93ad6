"""Panel data container, schema handling, and the CSV loader.

A loaded panel is a rectangular unit x time grid: every unit carries the
same ordered time points, rows are sorted by (unit, time).  The response
must be complete; covariates may have missing cells (reported per column)
and a model may only use columns that are complete on the rows it fits.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, SchemaError, StructuralError

ROLES = ("unit", "time", "response", "numeric", "categorical", "income_class")


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    role: str
    levels: tuple[str, ...] | None = None


def read_schema(source: str | Path | IO | Sequence[Mapping]) -> list[ColumnSchema]:
    """Parse a schema: a JSON list of {"column", "role", "levels"?} entries."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    elif hasattr(source, "read"):
        raw = json.load(source)
    else:
        raw = source
    if not isinstance(raw, list):
        raise SchemaError("schema must be a JSON list of column declarations")
    out = []
    for entry in raw:
        try:
            name, role = entry["column"], entry["role"]
        except (TypeError, KeyError):
            raise SchemaError(f"schema entry missing 'column'/'role': {entry!r}")
        if role not in ROLES:
            raise SchemaError(f"unknown role {role!r} for column {name!r}")
        levels = entry.get("levels")
        out.append(ColumnSchema(name, role, tuple(levels) if levels else None))
    roles = [c.role for c in out]
    for required in ("unit", "time", "response"):
        if roles.count(required) != 1:
            raise SchemaError(f"schema must declare exactly one {required!r} column")
    names = [c.name for c in out]
    if len(set(names)) != len(names):
        raise SchemaError("schema declares a column twice")
    return out


@dataclass(frozen=True)
class NumericColumn:
    name: str
    values: np.ndarray  # float; NaN marks a missing cell

    @property
    def kind(self) -> str:
        return "numeric"

    def take(self, idx: np.ndarray) -> "NumericColumn":
        return NumericColumn(self.name, self.values[idx])


@dataclass(frozen=True)
class CategoricalColumn:
    name: str
    codes: np.ndarray  # int; -1 marks a missing cell
    levels: tuple[str, ...]

    @property
    def kind(self) -> str:
        return "categorical"

    def take(self, idx: np.ndarray) -> "CategoricalColumn":
        return CategoricalColumn(self.name, self.codes[idx], self.levels)


Column = NumericColumn | CategoricalColumn


@dataclass(frozen=True)
class PanelDataset:
    """Rectangular longitudinal data, rows sorted by (unit, time)."""

    units: tuple[str, ...]
    times: tuple[int, ...]
    response: np.ndarray
    response_name: str
    columns: dict[str, Column]
    unit_name: str = "unit"
    time_name: str = "time"
    income_class: dict[str, str] | None = None
    missing_counts: dict[str, int] = field(default_factory=dict)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def n_obs(self) -> int:
        return len(self.units) * len(self.times)

    @property
    def unit_index(self) -> np.ndarray:
        """Row -> unit position (rows are unit-major)."""
        return np.repeat(np.arange(self.n_units), self.n_times)

    @property
    def time_index(self) -> np.ndarray:
        """Row -> position within a unit's time series."""
        return np.tile(np.arange(self.n_times), self.n_units)

    @property
    def time_values(self) -> np.ndarray:
        """Row -> actual time point (e.g. calendar year)."""
        return np.tile(np.asarray(self.times), self.n_units)

    @property
    def t_index(self) -> np.ndarray:
        """Row -> elapsed time t = time - first time point (0..T)."""
        return self.time_values - self.times[0]

    def column(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise SchemaError(f"panel has no column {name!r}") from None

    def numeric(self, name: str) -> np.ndarray:
        col = self.column(name)
        if not isinstance(col, NumericColumn):
            raise SchemaError(f"column {name!r} is categorical, expected numeric")
        return col.values

    def with_column(self, column: Column, missing: int = 0) -> "PanelDataset":
        if column.name in self.columns or column.name in (
            self.response_name,
            self.unit_name,
            self.time_name,
        ):
            raise SchemaError(f"column {column.name!r} already exists")
        cols = dict(self.columns)
        cols[column.name] = column
        counts = dict(self.missing_counts)
        counts[column.name] = missing
        return replace(self, columns=cols, missing_counts=counts)

    def drop_leading_times(self, n_drop: int) -> "PanelDataset":
        """Remove the first n_drop time points from every unit (used when a
        derived series is undefined at the start of each series)."""
        if n_drop <= 0:
            return self
        if n_drop >= self.n_times:
            raise StructuralError(
                f"cannot drop {n_drop} leading time points from series of length {self.n_times}"
            )
        keep = self.time_index >= n_drop
        idx = np.flatnonzero(keep)
        return replace(
            self,
            times=self.times[n_drop:],
            response=self.response[idx],
            columns={n: c.take(idx) for n, c in self.columns.items()},
        )

    def subset(
        self,
        units: Iterable[str] | None = None,
        years: tuple[int, int] | None = None,
    ) -> "PanelDataset":
        """Rectangular subsample by unit list and/or inclusive year range."""
        keep_units = tuple(u for u in self.units if units is None or u in set(units))
        keep_times = tuple(
            t for t in self.times if years is None or (years[0] <= t <= years[1])
        )
        if not keep_units or not keep_times:
            raise StructuralError("subsample filter leaves an empty panel")
        urank = {u: i for i, u in enumerate(self.units)}
        trank = {t: i for i, t in enumerate(self.times)}
        idx = np.array(
            [urank[u] * self.n_times + trank[t] for u in keep_units for t in keep_times],
            dtype=int,
        )
        income = None
        if self.income_class is not None:
            income = {u: self.income_class[u] for u in keep_units if u in self.income_class}
        return replace(
            self,
            units=keep_units,
            times=keep_times,
            response=self.response[idx],
            columns={n: c.take(idx) for n, c in self.columns.items()},
            income_class=income,
        )

    def complete_columns(self, names: Iterable[str]) -> bool:
        """True when every named column has no missing cell on this panel."""
        for name in names:
            col = self.column(name)
            if isinstance(col, NumericColumn):
                if np.isnan(col.values).any():
                    return False
            elif (col.codes < 0).any():
                return False
        return True


def _parse_float(token: str, column: str, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(
            f"line {line}: cannot parse {token!r} in numeric column {column!r}"
        ) from None
    if not np.isfinite(value):
        raise ParseError(f"line {line}: non-finite value {token!r} in column {column!r}")
    return value


def load_panel(source: str | Path | IO, schema: Sequence[ColumnSchema]) -> PanelDataset:
    """Load and validate a panel from CSV.

    The CSV must have a header row, comma separators, '.' decimals, and
    empty cells for missing values.  Duplicated (unit, time) pairs, a
    non-rectangular grid, missing responses, and undeclared categorical
    levels are all errors.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            return load_panel(fh, schema)
    if isinstance(source, (bytes, bytearray)):
        return load_panel(io.StringIO(source.decode("utf-8")), schema)

    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise StructuralError("empty CSV: no header row") from None
    header = [h.strip() for h in header]
    pos = {}
    for col in schema:
        if col.name not in header:
            raise SchemaError(f"declared column {col.name!r} not found in CSV header")
        pos[col.name] = header.index(col.name)

    unit_col = next(c for c in schema if c.role == "unit")
    time_col = next(c for c in schema if c.role == "time")
    resp_col = next(c for c in schema if c.role == "response")
    covariates = [c for c in schema if c.role in ("numeric", "categorical", "income_class")]

    rows: dict[tuple[str, int], dict] = {}
    declared_levels = {c.name: c.levels for c in covariates if c.role != "numeric"}
    seen_levels: dict[str, list[str]] = {c.name: [] for c in covariates if c.role != "numeric"}
    for line_no, raw in enumerate(reader, start=2):
        if not raw or all(not cell.strip() for cell in raw):
            continue
        if len(raw) != len(header):
            raise StructuralError(
                f"line {line_no}: expected {len(header)} cells, found {len(raw)}"
            )
        unit = raw[pos[unit_col.name]].strip()
        time_token = raw[pos[time_col.name]].strip()
        try:
            time = int(time_token)
        except ValueError:
            raise ParseError(
                f"line {line_no}: cannot parse {time_token!r} as integer time"
            ) from None
        key = (unit, time)
        if key in rows:
            raise StructuralError(f"duplicate observation for unit {unit!r} at time {time}")
        resp_token = raw[pos[resp_col.name]].strip()
        if resp_token == "":
            raise StructuralError(
                f"line {line_no}: missing response for unit {unit!r} at time {time}"
            )
        record = {"response": _parse_float(resp_token, resp_col.name, line_no)}
        for col in covariates:
            token = raw[pos[col.name]].strip()
            if col.role == "numeric":
                record[col.name] = np.nan if token == "" else _parse_float(token, col.name, line_no)
            else:
                if token == "":
                    record[col.name] = None
                    continue
                levels = declared_levels[col.name]
                if levels is not None and token not in levels:
                    raise SchemaError(
                        f"line {line_no}: undeclared level {token!r} in column {col.name!r}"
                    )
                if token not in seen_levels[col.name]:
                    seen_levels[col.name].append(token)
                record[col.name] = token
        rows[key] = record

    if not rows:
        raise StructuralError("CSV contains no data rows")

    units = tuple(sorted({u for u, _ in rows}))
    times = tuple(sorted({t for _, t in rows}))
    for unit in units:
        have = {t for u, t in rows if u == unit}
        if have != set(times):
            missing_t = sorted(set(times) - have)
            raise StructuralError(
                f"panel is not rectangular: unit {unit!r} lacks time points {missing_t}"
            )

    order = [(u, t) for u in units for t in times]
    response = np.array([rows[k]["response"] for k in order])
    columns: dict[str, Column] = {}
    missing_counts: dict[str, int] = {}
    income: dict[str, str] | None = None
    for col in covariates:
        cells = [rows[k][col.name] for k in order]
        if col.role == "numeric":
            values = np.array(cells, dtype=float)
            columns[col.name] = NumericColumn(col.name, values)
            missing_counts[col.name] = int(np.isnan(values).sum())
        else:
            levels = declared_levels[col.name] or tuple(sorted(seen_levels[col.name]))
            code = {lev: i for i, lev in enumerate(levels)}
            codes = np.array([-1 if c is None else code[c] for c in cells], dtype=int)
            columns[col.name] = CategoricalColumn(col.name, codes, levels)
            missing_counts[col.name] = int((codes < 0).sum())
            if col.role == "income_class":
                income = {}
                for u in units:
                    first = codes[units.index(u) * len(times)]
                    if first >= 0:
                        income[u] = levels[first]
    missing_counts[resp_col.name] = 0

    return PanelDataset(
        units=units,
        times=times,
        response=response,
        response_name=resp_col.name,
        columns=columns,
        unit_name=unit_col.name,
        time_name=time_col.name,
        income_class=income,
        missing_counts=missing_counts,
    )


def panel_from_arrays(
    units: Sequence[str],
    times: Sequence[int],
    response: np.ndarray,
    numeric: Mapping[str, np.ndarray] | None = None,
    categorical: Mapping[str, tuple[np.ndarray, Sequence[str]]] | None = None,
    response_name: str = "y",
    unit_name: str = "unit",
    time_name: str = "time",
) -> PanelDataset:
    """Build a rectangular panel directly from arrays (unit-major row
    order); the workhorse for simulations and tests."""
    n = len(units) * len(times)
    response = np.asarray(response, dtype=float).ravel()
    if response.shape != (n,):
        raise StructuralError(f"response must have {n} entries, got {response.shape}")
    columns: dict[str, Column] = {}
    counts: dict[str, int] = {response_name: 0}
    for name, vals in (numeric or {}).items():
        vals = np.asarray(vals, dtype=float).ravel()
        if vals.shape != (n,):
            raise StructuralError(f"column {name!r} must have {n} entries")
        columns[name] = NumericColumn(name, vals)
        counts[name] = int(np.isnan(vals).sum())
    for name, (codes, levels) in (categorical or {}).items():
        codes = np.asarray(codes, dtype=int).ravel()
        columns[name] = CategoricalColumn(name, codes, tuple(levels))
        counts[name] = int((codes < 0).sum())
    return PanelDataset(
        units=tuple(units),
        times=tuple(int(t) for t in times),
        response=response,
        response_name=response_name,
        columns=columns,
        unit_name=unit_name,
        time_name=time_name,
        missing_counts=counts,
    )


def write_panel_csv(panel: PanelDataset, destination: str | Path | IO) -> None:
    """Emit a panel as CSV, bit-exact for a later reload (floats are
    written with shortest round-trip repr, missing cells as empty)."""
    if isinstance(destination, (str, Path)):
        with open(destination, "w", encoding="utf-8", newline="") as fh:
            write_panel_csv(panel, fh)
            return
    writer = csv.writer(destination, lineterminator="\n")
    names = list(panel.columns)
    writer.writerow([panel.unit_name, panel.time_name, panel.response_name] + names)
    for r in range(panel.n_obs):
        u = panel.units[panel.unit_index[r]]
        t = panel.times[panel.time_index[r]]
        cells = [u, str(t), repr(float(panel.response[r]))]
        for name in names:
            col = panel.columns[name]
            if isinstance(col, NumericColumn):
                v = col.values[r]
                cells.append("" if np.isnan(v) else repr(float(v)))
            else:
                c = col.codes[r]
                cells.append("" if c < 0 else col.levels[c])
        writer.writerow(cells)
