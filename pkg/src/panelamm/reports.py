"""Report emission: summary tables, effect-curve grids, fit manifests,
selection audits, and the run manifest with content hashes.

All writers are deterministic: fixed column orders, '\n' line endings,
shortest round-trip float repr, sorted JSON keys.  Identical inputs give
byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .caic import CaicReport
from .fit import EffectCurve, EffectSurface, FittedAMM, smooth_effect_curve, term_significance
from .selection import SelectionOutcome, VaryingCoefFit


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _jsonable(value):
    """Strict-JSON form: numpy scalars/arrays to Python, non-finite floats
    to None."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else None
    return value


def write_json(path: Path, payload) -> Path:
    path.write_text(
        json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return path


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Fit reports


def fit_manifest(fit: FittedAMM, caic: CaicReport | None = None) -> dict:
    """JSON-ready summary of one fit: coefficients, smoothing parameters,
    variance components, EDFs, log-likelihoods, convergence."""
    bundle = fit.bundle
    lay = fit._layout
    terms = []
    for term in bundle.terms:
        entry: dict = {
            "name": term.name,
            "kind": term.kind,
            "period": term.period,
            "edf": fit.edf_by_term[term.name],
            "dropped_columns": term.dropped,
        }
        if term.kind not in ("units",):
            test = term_significance(fit, term.name)
            entry["p_value"] = test.p_value
            entry["significance"] = test.code
            coef = fit.term_coefficients(term.name)
            names = [bundle.x_names[j] for j in term.x_cols]
            names += [f"{term.name}.pen{i}" for i in range(len(coef) - len(names))]
            entry["coefficients"] = dict(zip(names, coef.tolist()))
        terms.append(entry)
    payload = {
        "label": bundle.label,
        "effects": bundle.effects,
        "heteroscedastic": bundle.heteroscedastic,
        "n_obs": bundle.n_obs,
        "n_units": bundle.n_units,
        "break_year": bundle.break_year,
        "converged": fit.converged,
        "method": fit.settings.method,
        "sigma2": fit.sigma2,
        "G": None if fit.G is None else fit.G.tolist(),
        "unit_variances": dict(zip(bundle.units, fit.unit_variances.tolist())),
        "unit_weights": dict(zip(bundle.units, fit.unit_weights.tolist())),
        "lambdas": {k: list(v) for k, v in fit.lambdas.items()},
        "edf": fit.edf_by_term,
        "edf_total": fit.edf_total,
        "cond_loglik": fit.cond_loglik,
        "criterion_loglik": fit.marginal_loglik,
        "annotations": bundle.annotations,
        "terms": terms,
    }
    if caic is not None:
        payload["caic"] = {
            "value": caic.caic,
            "trace": caic.trace,
            "r": caic.r,
            "backend": caic.backend,
        }
    return payload


def emit_fit_report(
    fit: FittedAMM,
    out_dir: Path,
    prefix: str = "fit",
    caic: CaicReport | None = None,
    n_grid: int = 100,
) -> list[Path]:
    """Write the fit manifest, a term summary table, and one curve-grid
    CSV per smooth/tensor term (plus the data-support rug for smooths)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    manifest = fit_manifest(fit, caic)
    written.append(write_json(out_dir / f"{prefix}_manifest.json", manifest))

    rows = []
    for entry in manifest["terms"]:
        rows.append(
            [
                entry["name"],
                entry["kind"],
                entry["period"] or "",
                entry["edf"],
                entry.get("p_value"),
                entry.get("significance", ""),
            ]
        )
    written.append(
        write_csv(
            out_dir / f"{prefix}_terms.csv",
            ["term", "kind", "period", "edf", "p_value", "significance"],
            rows,
        )
    )

    for term in fit.bundle.terms:
        if term.kind not in ("smooth", "tensor"):
            continue
        curve = smooth_effect_curve(fit, term.name, n_grid=n_grid)
        slug = _slug(term.name)
        if isinstance(curve, EffectCurve):
            written.append(
                write_csv(
                    out_dir / f"{prefix}_curve_{slug}.csv",
                    ["x", "effect", "lower", "upper"],
                    zip(curve.grid, curve.effect, curve.lower, curve.upper),
                )
            )
            written.append(
                write_csv(
                    out_dir / f"{prefix}_rug_{slug}.csv",
                    ["x"],
                    ([v] for v in curve.rug),
                )
            )
        else:
            written.append(
                write_csv(
                    out_dir / f"{prefix}_surface_{slug}.csv",
                    ["x", "z", "effect", "lower", "upper"],
                    zip(curve.grid_x, curve.grid_z, curve.effect, curve.lower, curve.upper),
                )
            )
    return written


# ---------------------------------------------------------------------------
# Selection reports


def emit_selection_report(outcome: SelectionOutcome, out_dir: Path) -> list[Path]:
    """Selection table (ascending cAIC, failures last) and the audit log of
    every comparison performed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    candidates = outcome.all_candidates()
    rows = sorted(
        (c.row() for c in candidates),
        key=lambda r: (math.isinf(r["caic"]), r["caic"], r["label"]),
    )
    header = [
        "label",
        "group",
        "subsample",
        "n_obs",
        "effects_mode",
        "mundlak_p",
        "cond_loglik",
        "trace",
        "r",
        "caic",
        "converged",
        "first_stage_winner",
        "overall_winner",
        "error",
    ]
    winners = {c.label for c in outcome.first_stage_winners.values() if c is not None}
    table = []
    for r in rows:
        table.append(
            [
                r["label"],
                r["group"],
                r["subsample"],
                r["n_obs"],
                r["effects_mode"],
                r["mundlak_p"],
                r["cond_loglik"],
                r["trace"],
                r["r"],
                r["caic"],
                r["converged"],
                r["label"] in winners,
                r["label"] == outcome.overall_winner,
                r["error"],
            ]
        )
    paths = [write_csv(out_dir / "selection_table.csv", header, table)]
    audit = {
        "first_stage_winners": {
            g: (w.label if w else None) for g, w in outcome.first_stage_winners.items()
        },
        "pool_winner": outcome.pool_winner,
        "overall_winner": outcome.overall_winner,
        "deferred": [c.label for c in outcome.deferred],
        "comparisons": [
            {
                "stage": c.stage,
                "subsample": c.subsample_id,
                "labels": list(c.labels),
                "caics": [x if math.isfinite(x) else None for x in c.caics],
                "winner": c.winner,
            }
            for c in outcome.comparisons
        ],
    }
    paths.append(write_json(out_dir / "selection_audit.json", audit))
    return paths


def emit_varying_report(vc: VaryingCoefFit, out_dir: Path, prefix: str = "break") -> list[Path]:
    """Pre/post tables and curve grids for a varying-coefficient refit."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for est in vc.estimates:
        coef = est.coefficients
        rows.append(
            [
                est.term,
                est.period,
                est.kind,
                est.edf,
                coef[0] if coef.size == 1 else None,
                est.p_value,
                est.code,
            ]
        )
    paths = [
        write_csv(
            out_dir / f"{prefix}_terms.csv",
            ["term", "period", "kind", "edf", "coefficient", "p_value", "significance"],
            rows,
        )
    ]
    paths += emit_fit_report(vc.fit, out_dir, prefix=f"{prefix}_fit")
    if vc.dropped:
        paths.append(
            write_json(out_dir / f"{prefix}_dropped.json", {"dropped": vc.dropped})
        )
    return paths


# ---------------------------------------------------------------------------
# Boosting reports


def emit_boost_report(path_obj, distilled, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [
        write_csv(
            out_dir / "boost_path.csv",
            ["iteration", "learner", "delta", "risk"],
            (
                [m + 1, path_obj.learner_names[path_obj.selections[m]],
                 path_obj.deltas[m], path_obj.risks[m]]
                for m in range(path_obj.n_iterations)
            ),
        )
    ]
    freq_rows = [
        [name, f, f >= distilled.threshold and f > 0.0]
        for name, f in distilled.frequencies.items()
    ]
    paths.append(
        write_csv(
            out_dir / "boost_frequencies.csv",
            ["learner", "frequency", "kept"],
            freq_rows,
        )
    )
    paths.append(
        write_json(
            out_dir / "boost_summary.json",
            {
                "m_stop": path_obj.m_stop,
                "n_iterations": path_obj.n_iterations,
                "nu": path_obj.nu,
                "offset": path_obj.offset,
                "threshold": distilled.threshold,
                "kept": distilled.kept,
                "mean_oob_risk": (
                    None
                    if path_obj.mean_oob_risk is None
                    else path_obj.mean_oob_risk.tolist()
                ),
            },
        )
    )
    paths.append(write_json(out_dir / "distilled_spec.json", distilled.spec.to_dict()))
    return paths


# ---------------------------------------------------------------------------
# Run manifest


def write_run_manifest(
    out_dir: Path,
    command: str,
    inputs: Mapping[str, Path],
    outputs: Sequence[Path],
    seed: int | None,
    wall_clock_seconds: float,
    version: str,
) -> Path:
    """Provenance record: hashes of every input and output, the seed, and
    the software version.  Outputs are byte-reproducible from the hashed
    inputs plus the seed; the wall clock is informational only."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "seed": seed,
        "version": version,
        "wall_clock_seconds": wall_clock_seconds,
        "input_hashes": {
            name: sha256_file(Path(p)) for name, p in sorted(inputs.items())
        },
        "outputs": [
            {
                "path": str(Path(p).relative_to(out_dir)),
                "sha256": sha256_file(Path(p)),
                "bytes": Path(p).stat().st_size,
            }
            for p in sorted(outputs, key=lambda p: str(p))
        ],
    }
    return write_json(out_dir / "run_manifest.json", manifest)
