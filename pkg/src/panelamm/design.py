"""Assemble numeric designs from a panel and a model spec.

Produces an unpenalized design X (intercept, linear terms, interaction
products, per-unit regressor averages, smooth null-space directions, and
unit dummies under fixed effects), one penalized block per smooth/tensor
term, and the unit random-effect design when the spec asks for it.

Smooths are sum-to-zero constrained over the fitting rows and stored in
mixed form: the penalty null space moves into X, the penalized remainder
becomes a ridge block (univariate) or a two-penalty block (tensor).  With
a break year every covariate term is duplicated into a pre and a post
version supported only on its own period.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy.interpolate import BSpline

from .basis import (
    BasisBlock,
    apply_sum_to_zero,
    bspline_basis,
    split_penalty_null_space,
    sum_to_zero_transform,
    tensor_product,
)
from .errors import DomainError, SchemaError, StructuralError
from .modelspec import ModelSpec, SmoothTerm, TensorTerm
from .panel import CategoricalColumn, NumericColumn, PanelDataset

RANK_RTOL = 1e-9


@dataclass
class PenalizedBlock:
    """One penalized coefficient block.

    ``penalties`` is None for ridge blocks (identity penalty, one
    smoothing parameter); otherwise a list of PSD matrices, one smoothing
    parameter each, whose sum is positive definite.
    """

    name: str
    Z: np.ndarray
    penalties: list[np.ndarray] | None = None

    @property
    def n_coef(self) -> int:
        return self.Z.shape[1]

    @property
    def n_lambda(self) -> int:
        return 1 if self.penalties is None else len(self.penalties)


@dataclass
class Term:
    """Bookkeeping for one model term: its retained X columns, its
    penalized block (if any), and whatever is needed to rebuild its design
    rows for new data."""

    name: str
    kind: str  # intercept|linear|categorical|interaction|mundlak_avg|smooth|tensor|units
    x_cols: list[int] = field(default_factory=list)
    local_kept: list[int] = field(default_factory=list)
    block: int | None = None
    period: str | None = None
    info: dict = field(default_factory=dict)
    dropped: list[str] = field(default_factory=list)


@dataclass
class DesignBundle:
    y: np.ndarray
    X: np.ndarray
    x_names: list[str]
    blocks: list[PenalizedBlock]
    terms: list[Term]
    unit_design: np.ndarray | None
    units: tuple[str, ...]
    unit_index: np.ndarray
    t_index: np.ndarray
    effects: str
    heteroscedastic: bool
    label: str
    spec: ModelSpec
    unit_name: str
    time_name: str
    first_time: int
    break_year: int | None = None
    dropped: list[str] = field(default_factory=list)
    annotations: list[str] = field(default_factory=list)

    @property
    def n_obs(self) -> int:
        return self.y.size

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_unpenalized(self) -> int:
        return self.X.shape[1]

    def with_response(self, y: np.ndarray) -> "DesignBundle":
        y = np.asarray(y, dtype=float).ravel()
        if y.shape != self.y.shape:
            raise StructuralError("replacement response has the wrong length")
        return replace(self, y=y)

    def term(self, name: str) -> Term:
        for t in self.terms:
            if t.name == name:
                return t
        raise SchemaError(f"model has no term named {name!r}")


def _values(panel: PanelDataset, name: str) -> np.ndarray:
    """Numeric values for a column name; the time column resolves to the
    actual time points so e.g. a smooth of the year is expressible."""
    if name == panel.time_name:
        return panel.time_values.astype(float)
    return panel.numeric(name)


def _require_complete(panel: PanelDataset, names: Sequence[str]) -> None:
    bad = []
    for name in names:
        if name == panel.time_name:
            continue
        col = panel.column(name)
        n_missing = (
            int(np.isnan(col.values).sum())
            if isinstance(col, NumericColumn)
            else int((col.codes < 0).sum())
        )
        if n_missing:
            bad.append(f"{name} ({n_missing} missing)")
    if bad:
        raise StructuralError(
            "model uses columns with missing cells on this panel: " + ", ".join(bad)
        )


def _contrasts(col: CategoricalColumn) -> tuple[np.ndarray, list[str], str]:
    """Treatment-contrast dummies against the first level observed in the
    data; returns (n x L-1 design, level names used, reference level)."""
    observed = col.codes[col.codes >= 0]
    if observed.size == 0:
        raise StructuralError(f"categorical column {col.name!r} is entirely missing")
    ref = int(observed[0])
    keep = [i for i in range(len(col.levels)) if i != ref]
    design = np.column_stack([(col.codes == i).astype(float) for i in keep])
    return design, [col.levels[i] for i in keep], col.levels[ref]


def _linear_expansion(panel: PanelDataset, name: str) -> tuple[np.ndarray, list[str], dict]:
    """Columns for one linear regressor: a single column for numerics,
    treatment contrasts for categoricals."""
    if name == panel.time_name:
        vals = panel.time_values.astype(float)
        return vals[:, None], [name], {"type": "numeric", "col": name}
    col = panel.column(name)
    if isinstance(col, NumericColumn):
        return col.values[:, None], [name], {"type": "numeric", "col": name}
    design, levels, ref = _contrasts(col)
    names = [f"{name}[{lev}]" for lev in levels]
    return design, names, {
        "type": "categorical",
        "col": name,
        "levels": levels,
        "ref": ref,
        "all_levels": list(col.levels),
    }


def _period_masks(panel: PanelDataset, break_year: int | None):
    if break_year is None:
        return [(None, np.ones(panel.n_obs, dtype=bool))]
    years = panel.time_values
    pre = years <= break_year
    post = ~pre
    if not pre.any() or not post.any():
        raise StructuralError(
            f"break year {break_year} leaves an empty period on a panel "
            f"covering {panel.times[0]}..{panel.times[-1]}"
        )
    return [("pre", pre), ("post", post)]


def _smooth_parts(
    panel: PanelDataset, term: SmoothTerm, mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray, dict] | None:
    """Constrained, null-split design pieces for one smooth term; None when
    the term has no variation on its period."""
    x = _values(panel, term.col)
    if np.ptp(x[mask]) == 0.0:
        return None
    block = bspline_basis(x, k=term.k)
    design = block.design * mask[:, None]
    Q = sum_to_zero_transform(design.sum(axis=0))
    constrained = design @ Q
    penalty = Q.T @ block.penalty @ Q
    U0, U1, pos = split_penalty_null_space(penalty)
    U1s = U1 / np.sqrt(pos)
    info = {
        "col": term.col,
        "knots": block.knots,
        "degree": block.degree,
        "x_min": block.x_min,
        "x_max": block.x_max,
        "Q": Q,
        "U0": U0,
        "U1s": U1s,
        "k": term.k,
        "x_obs": x[mask].copy(),
    }
    return constrained @ U0, constrained @ U1s, info


def _tensor_parts(
    panel: PanelDataset, term: TensorTerm, mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray], dict] | None:
    x = _values(panel, term.col1)
    z = _values(panel, term.col2)
    if np.ptp(x[mask]) == 0.0 or np.ptp(z[mask]) == 0.0:
        return None
    bx = bspline_basis(x, k=term.k1)
    bz = bspline_basis(z, k=term.k2)
    tb = tensor_product(bx, bz)
    design = tb.design * mask[:, None]
    Q = sum_to_zero_transform(design.sum(axis=0))
    constrained = design @ Q
    S1 = Q.T @ tb.penalties[0] @ Q
    S2 = Q.T @ tb.penalties[1] @ Q
    U0, U1, _ = split_penalty_null_space(S1 + S2)
    pens = [U1.T @ S1 @ U1, U1.T @ S2 @ U1]
    info = {
        "cols": (term.col1, term.col2),
        "knots_x": bx.knots,
        "knots_z": bz.knots,
        "degree": bx.degree,
        "x_range": (bx.x_min, bx.x_max),
        "z_range": (bz.x_min, bz.x_max),
        "Q": Q,
        "U0": U0,
        "U1": U1,
        "k": (term.k1, term.k2),
    }
    return constrained @ U0, constrained @ U1, pens, info


def _unit_columns(panel: PanelDataset) -> tuple[np.ndarray, list[str]]:
    """Interleaved per-unit (intercept, slope-in-t) columns."""
    n, nu = panel.n_obs, panel.n_units
    t = panel.t_index.astype(float)
    Z = np.zeros((n, 2 * nu))
    rows = np.arange(n)
    Z[rows, 2 * panel.unit_index] = 1.0
    Z[rows, 2 * panel.unit_index + 1] = t
    names = []
    for u in panel.units:
        names += [f"unit[{u}]", f"unit[{u}]:t"]
    return Z, names


def _unit_averages(panel: PanelDataset, design: np.ndarray) -> np.ndarray:
    """Per-unit time averages of each design column, broadcast to rows."""
    nu, nt = panel.n_units, panel.n_times
    means = design.reshape(nu, nt, -1).mean(axis=1)
    return np.repeat(means, nt, axis=0)


def build_design(
    panel: PanelDataset, spec: ModelSpec, break_year: int | None = None
) -> DesignBundle:
    """Turn a spec into the matrices the fitting engine consumes."""
    spec.validate(panel)
    smooth_terms = list(spec.smooth)
    if spec.include_year_smooth and not any(s.col == panel.time_name for s in smooth_terms):
        smooth_terms.append(SmoothTerm(panel.time_name, spec.year_smooth_k))
    _require_complete(panel, spec.covariate_columns)

    periods = _period_masks(panel, break_year)
    terms: list[Term] = []
    x_parts: list[np.ndarray] = []
    x_names: list[str] = []
    blocks: list[PenalizedBlock] = []
    annotations: list[str] = []

    def add_x(term: Term, cols: np.ndarray, names: list[str]) -> None:
        start = sum(p.shape[1] for p in x_parts)
        x_parts.append(cols)
        x_names.extend(names)
        term.x_cols = list(range(start, start + cols.shape[1]))

    def suffix(base: str, pname: str | None) -> str:
        return base if pname is None else f"{base}:{pname}"

    if spec.effects != "fixed":
        t = Term(name="(Intercept)", kind="intercept")
        add_x(t, np.ones((panel.n_obs, 1)), ["(Intercept)"])
        terms.append(t)

    mundlak_sources: list[tuple[str, np.ndarray, list[str]]] = []

    def note_mundlak(name: str, cols: np.ndarray, names: list[str]) -> None:
        if spec.effects == "mundlak" and all(name != s for s, _, _ in mundlak_sources):
            mundlak_sources.append((name, cols, names))

    for name in spec.linear:
        cols, names, info = _linear_expansion(panel, name)
        note_mundlak(name, cols, names)
        for pname, mask in periods:
            term = Term(name=suffix(name, pname), kind=info["type"].replace("numeric", "linear"),
                        period=pname, info=info)
            masked = cols * mask[:, None]
            if pname is not None and not _has_variation(masked, mask):
                annotations.append(f"term {term.name} dropped: no variation in period")
                continue
            add_x(term, masked, [suffix(n, pname) for n in names])
            terms.append(term)

    for a, b in spec.linear_pairs:
        cols_a, names_a, info_a = _linear_expansion(panel, a)
        cols_b, names_b, info_b = _linear_expansion(panel, b)
        note_mundlak(a, cols_a, names_a)
        note_mundlak(b, cols_b, names_b)
        prod = (cols_a[:, :, None] * cols_b[:, None, :]).reshape(panel.n_obs, -1)
        names = [f"{na}:{nb}" for na in names_a for nb in names_b]
        for pname, mask in periods:
            term = Term(
                name=suffix(f"{a}:{b}", pname),
                kind="interaction",
                period=pname,
                info={"left": info_a, "right": info_b},
            )
            masked = prod * mask[:, None]
            if pname is not None and not _has_variation(masked, mask):
                annotations.append(f"term {term.name} dropped: no variation in period")
                continue
            add_x(term, masked, [suffix(n, pname) for n in names])
            terms.append(term)

    for sterm in smooth_terms:
        note_mundlak(sterm.col, _values(panel, sterm.col)[:, None], [sterm.col])
        for pname, mask in periods:
            parts = _smooth_parts(panel, sterm, mask)
            label = suffix(f"s({sterm.col})", pname)
            if parts is None:
                annotations.append(f"term {label} dropped: no variation in period")
                continue
            x_cols, z_cols, info = parts
            term = Term(name=label, kind="smooth", period=pname, info=info)
            add_x(term, x_cols, [f"{label}.null{i}" for i in range(x_cols.shape[1])])
            term.block = len(blocks)
            blocks.append(PenalizedBlock(name=label, Z=z_cols))
            terms.append(term)

    for tterm in spec.tensor_pairs:
        note_mundlak(tterm.col1, _values(panel, tterm.col1)[:, None], [tterm.col1])
        note_mundlak(tterm.col2, _values(panel, tterm.col2)[:, None], [tterm.col2])
        for pname, mask in periods:
            parts = _tensor_parts(panel, tterm, mask)
            label = suffix(f"te({tterm.col1},{tterm.col2})", pname)
            if parts is None:
                annotations.append(f"term {label} dropped: no variation in period")
                continue
            x_cols, z_cols, pens, info = parts
            term = Term(name=label, kind="tensor", period=pname, info=info)
            add_x(term, x_cols, [f"{label}.null{i}" for i in range(x_cols.shape[1])])
            term.block = len(blocks)
            blocks.append(PenalizedBlock(name=label, Z=z_cols, penalties=pens))
            terms.append(term)

    if spec.effects == "mundlak":
        for src, cols, names in mundlak_sources:
            avg = _unit_averages(panel, cols)
            term = Term(
                name=f"avg({src})",
                kind="mundlak_avg",
                info={
                    "source": src,
                    "unit_values": {
                        u: avg[i * panel.n_times] for i, u in enumerate(panel.units)
                    },
                },
            )
            add_x(term, avg, [f"avg({n})" for n in names])
            terms.append(term)

    unit_design = None
    if spec.effects == "fixed":
        Zu, names = _unit_columns(panel)
        term = Term(name="units", kind="units", info={"mode": "fixed"})
        add_x(term, Zu, names)
        terms.append(term)
    elif spec.effects in ("random", "mundlak"):
        unit_design, _ = _unit_columns(panel)
        terms.append(Term(name="units", kind="units", info={"mode": "random"}))

    X = np.column_stack(x_parts) if x_parts else np.zeros((panel.n_obs, 0))
    keep, dropped_idx = _rank_retain(X)
    dropped = [x_names[j] for j in dropped_idx]
    if dropped:
        annotations.append(f"rank-deficient design: dropped columns {dropped}")
    X = X[:, keep]
    kept_names = [x_names[j] for j in keep]
    remap = {old: new for new, old in enumerate(keep)}
    for term in terms:
        retained, lost, local = [], [], []
        for local_idx, j in enumerate(term.x_cols):
            if j in remap:
                retained.append(remap[j])
                local.append(local_idx)
            else:
                lost.append(x_names[j])
        term.x_cols = retained
        term.local_kept = local
        term.dropped = lost

    return DesignBundle(
        y=panel.response.copy(),
        X=X,
        x_names=kept_names,
        blocks=blocks,
        terms=terms,
        unit_design=unit_design,
        units=panel.units,
        unit_index=panel.unit_index,
        t_index=panel.t_index.astype(float),
        effects=spec.effects,
        heteroscedastic=spec.heteroscedastic,
        label=spec.label,
        spec=spec,
        unit_name=panel.unit_name,
        time_name=panel.time_name,
        first_time=panel.times[0],
        break_year=break_year,
        dropped=dropped,
        annotations=annotations,
    )


def _has_variation(masked_cols: np.ndarray, mask: np.ndarray) -> bool:
    """A period term is estimable only if some column varies within the
    period's rows."""
    sub = masked_cols[mask]
    return bool(np.any(np.ptp(sub, axis=0) > 0.0))


def _rank_retain(X: np.ndarray) -> tuple[list[int], list[int]]:
    """Numerically independent columns of X via pivoted QR; returns
    (kept original indices sorted, dropped indices)."""
    p = X.shape[1]
    if p == 0:
        return [], []
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return [], list(piv)
    rank = int(np.sum(diag > RANK_RTOL * diag[0]))
    keep = sorted(piv[:rank].tolist())
    drop = sorted(piv[rank:].tolist())
    return keep, drop


# ---------------------------------------------------------------------------
# Row assembly for new data (prediction, effect curves)


def _new_values(
    bundle: DesignBundle, data: Mapping[str, np.ndarray], name: str, n: int
) -> np.ndarray:
    if name == bundle.time_name:
        vals = np.asarray(data[bundle.time_name], dtype=float)
    else:
        if name not in data:
            raise SchemaError(f"new data lacks column {name!r}")
        vals = np.asarray(data[name], dtype=float)
    if vals.shape != (n,):
        raise StructuralError(f"new data column {name!r} has wrong length")
    return vals


def _expand_linear_new(
    bundle: DesignBundle, info: dict, data: Mapping, n: int
) -> np.ndarray:
    if info["type"] == "numeric":
        return _new_values(bundle, data, info["col"], n)[:, None]
    tokens = np.asarray(data[info["col"]])
    out = np.zeros((n, len(info["levels"])))
    known = set(info["all_levels"])
    for r, token in enumerate(tokens):
        if token not in known:
            raise SchemaError(
                f"unknown level {token!r} for categorical column {info['col']!r}"
            )
        if token in info["levels"]:
            out[r, info["levels"].index(token)] = 1.0
    return out


def term_design_rows(
    bundle: DesignBundle, term: Term, data: Mapping[str, np.ndarray], n: int
) -> tuple[np.ndarray, np.ndarray | None]:
    """(X columns, penalized columns) of one term evaluated on new rows.

    The returned X part contains only the columns retained after the rank
    check, in the same order as ``term.x_cols``.
    """
    if term.kind == "intercept":
        full = np.ones((n, 1))
        z = None
    elif term.kind in ("linear", "categorical"):
        full = _expand_linear_new(bundle, term.info, data, n)
        z = None
    elif term.kind == "interaction":
        left = _expand_linear_new(bundle, term.info["left"], data, n)
        right = _expand_linear_new(bundle, term.info["right"], data, n)
        full = (left[:, :, None] * right[:, None, :]).reshape(n, -1)
        z = None
    elif term.kind == "mundlak_avg":
        lut = term.info["unit_values"]
        rows = []
        for u in np.asarray(data[bundle.unit_name]):
            if u not in lut:
                raise SchemaError(f"no stored regressor average for unit {u!r}")
            rows.append(lut[u])
        full = np.asarray(rows, dtype=float).reshape(n, -1)
        z = None
    elif term.kind == "smooth":
        info = term.info
        x = _new_values(bundle, data, info["col"], n)
        if x.size and (x.min() < info["x_min"] - 1e-12 or x.max() > info["x_max"] + 1e-12):
            raise DomainError(
                f"{term.name}: evaluation points outside training support "
                f"[{info['x_min']}, {info['x_max']}]"
            )
        B = BSpline.design_matrix(
            np.clip(x, info["x_min"], info["x_max"]), info["knots"], info["degree"]
        ).toarray()
        BQ = B @ info["Q"]
        full, z = BQ @ info["U0"], BQ @ info["U1s"]
    elif term.kind == "tensor":
        info = term.info
        x = _new_values(bundle, data, info["cols"][0], n)
        zv = _new_values(bundle, data, info["cols"][1], n)
        for vals, rng, side in ((x, info["x_range"], "x"), (zv, info["z_range"], "z")):
            if vals.size and (vals.min() < rng[0] - 1e-12 or vals.max() > rng[1] + 1e-12):
                raise DomainError(f"{term.name}: {side} points outside training support {rng}")
        Bx = BSpline.design_matrix(
            np.clip(x, *info["x_range"]), info["knots_x"], info["degree"]
        ).toarray()
        Bz = BSpline.design_matrix(
            np.clip(zv, *info["z_range"]), info["knots_z"], info["degree"]
        ).toarray()
        TQ = (Bx[:, :, None] * Bz[:, None, :]).reshape(n, -1) @ info["Q"]
        full, z = TQ @ info["U0"], TQ @ info["U1"]
    else:
        raise SchemaError(f"cannot rebuild design rows for term kind {term.kind!r}")

    if term.period is not None:
        years = np.asarray(data[bundle.time_name], dtype=float)
        mask = (years <= bundle.break_year) if term.period == "pre" else (years > bundle.break_year)
        full = full * mask[:, None]
        if z is not None:
            z = z * mask[:, None]
    return full[:, term.local_kept], z
