"""Model specifications: which columns enter linearly, as smooths, as
interactions, and how unit heterogeneity is handled."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Mapping

from .errors import SchemaError
from .panel import CategoricalColumn, NumericColumn, PanelDataset

EFFECTS_MODES = ("random", "fixed", "mundlak", "none")


@dataclass(frozen=True)
class SmoothTerm:
    col: str
    k: int = 10


@dataclass(frozen=True)
class TensorTerm:
    col1: str
    col2: str
    k1: int = 5
    k2: int = 5


@dataclass(frozen=True)
class ModelSpec:
    """One candidate model.

    linear / smooth / linear_pairs / tensor_pairs are the four disjoint
    kinds of covariate effects; ``effects`` picks the unit part: random
    intercept+slope, per-unit fixed intercept+slope (no global intercept),
    the random model augmented with per-unit regressor averages, or no
    unit part at all ('none' is a diagnostic reduction used for classical
    checks).
    """

    label: str
    linear: tuple[str, ...] = ()
    smooth: tuple[SmoothTerm, ...] = ()
    linear_pairs: tuple[tuple[str, str], ...] = ()
    tensor_pairs: tuple[TensorTerm, ...] = ()
    effects: str = "random"
    heteroscedastic: bool = False
    include_year_smooth: bool = False
    year_smooth_k: int = 10

    def __post_init__(self):
        if self.effects not in EFFECTS_MODES:
            raise SchemaError(f"unknown effects mode {self.effects!r}")
        smooth_cols = {s.col for s in self.smooth}
        overlap = smooth_cols & set(self.linear)
        if overlap:
            raise SchemaError(f"columns in both linear and smooth sets: {sorted(overlap)}")

    @property
    def covariate_columns(self) -> tuple[str, ...]:
        """Unique covariate columns referenced anywhere in the spec, in
        first-mention order."""
        seen: list[str] = []
        for name in self.linear:
            if name not in seen:
                seen.append(name)
        for pair in self.linear_pairs:
            for name in pair:
                if name not in seen:
                    seen.append(name)
        for term in self.smooth:
            if term.col not in seen:
                seen.append(term.col)
        for term in self.tensor_pairs:
            for name in (term.col1, term.col2):
                if name not in seen:
                    seen.append(name)
        return tuple(seen)

    def with_effects(self, mode: str) -> "ModelSpec":
        return replace(self, effects=mode)

    def validate(self, panel: PanelDataset) -> None:
        """Check every referenced column exists with a usable type."""
        for name in self.linear:
            col = panel.column(name)
            if not isinstance(col, (NumericColumn, CategoricalColumn)):
                raise SchemaError(f"unusable linear column {name!r}")
        for term in self.smooth:
            col = panel.column(term.col)
            if not isinstance(col, NumericColumn):
                raise SchemaError(f"smooth term needs a numeric column, got {term.col!r}")
            if term.k < 4:
                raise SchemaError(f"smooth basis dimension must be >= 4, got k={term.k}")
        for a, b in self.linear_pairs:
            panel.column(a), panel.column(b)
        for term in self.tensor_pairs:
            for name in (term.col1, term.col2):
                if not isinstance(panel.column(name), NumericColumn):
                    raise SchemaError(f"tensor term needs numeric columns, got {name!r}")

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "linear": list(self.linear),
            "smooth": [{"col": s.col, "k": s.k} for s in self.smooth],
            "linear_pairs": [list(p) for p in self.linear_pairs],
            "tensor_pairs": [
                {"col1": t.col1, "col2": t.col2, "k1": t.k1, "k2": t.k2}
                for t in self.tensor_pairs
            ],
            "effects": self.effects,
            "heteroscedastic": self.heteroscedastic,
            "include_year_smooth": self.include_year_smooth,
        }


def spec_from_dict(raw: Mapping) -> ModelSpec:
    try:
        label = raw["label"]
    except (TypeError, KeyError):
        raise SchemaError("model spec needs a 'label'") from None
    smooth = []
    for entry in raw.get("smooth", []):
        if isinstance(entry, str):
            smooth.append(SmoothTerm(entry))
        else:
            smooth.append(SmoothTerm(entry["col"], int(entry.get("k", 10))))
    tensors = []
    for entry in raw.get("tensor_pairs", []):
        tensors.append(
            TensorTerm(
                entry["col1"],
                entry["col2"],
                int(entry.get("k1", 5)),
                int(entry.get("k2", 5)),
            )
        )
    pairs = tuple(tuple(p) for p in raw.get("linear_pairs", []))
    for p in pairs:
        if len(p) != 2:
            raise SchemaError(f"linear_pairs entries must have two columns, got {p}")
    return ModelSpec(
        label=label,
        linear=tuple(raw.get("linear", [])),
        smooth=tuple(smooth),
        linear_pairs=pairs,
        tensor_pairs=tuple(tensors),
        effects=raw.get("effects", "random"),
        heteroscedastic=bool(raw.get("heteroscedastic", False)),
        include_year_smooth=bool(raw.get("include_year_smooth", False)),
        year_smooth_k=int(raw.get("year_smooth_k", 10)),
    )


def read_spec(source: str | Path | IO | Mapping) -> ModelSpec:
    """Read a model spec from a JSON file, stream, or mapping."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"malformed model spec JSON: {exc}") from None
    elif hasattr(source, "read"):
        try:
            raw = json.load(source)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"malformed model spec JSON: {exc}") from None
    else:
        raw = source
    return spec_from_dict(raw)
