"""Model selection: the regressor-average (Mundlak) test for choosing
between random and fixed unit effects, the two-stage cAIC tournament, and
varying-coefficient refits around a break year.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import chi2

from .caic import CaicReport, conditional_aic
from .design import build_design
from .errors import PanelAmmError, SchemaError, StructuralError
from .fit import FitSettings, FittedAMM, fit_amm, term_significance
from .modelspec import ModelSpec
from .panel import PanelDataset

TIE_RESOLUTION = 1e-9  # cAIC differences below this count as a tie


# ---------------------------------------------------------------------------
# Random- vs fixed-effects decision


@dataclass(frozen=True)
class MundlakResult:
    t_lrt: float
    df: int
    p_value: float
    decision: str  # "random" or "fixed"
    inconclusive: bool = False
    note: str = ""


def mundlak_lrt(
    panel: PanelDataset,
    spec: ModelSpec,
    settings: FitSettings | None = None,
    likelihood: str = "marginal",
) -> MundlakResult:
    """Likelihood-ratio test of the random-effects assumption.

    Augments the model with per-unit time averages of every regressor and
    tests their joint nullity; rejection at 5% means the unit effects are
    correlated with the regressors and fixed effects are the safer choice.

    Both fits use maximum likelihood (fixed-effects sets differ, so
    restricted likelihoods are not comparable).  By default the statistic
    uses the maximized marginal log-likelihoods, which gives the test its
    chi-square calibration; ``likelihood="conditional"`` instead differences
    the conditional log-likelihoods with predicted unit effects plugged in
    (a severely conservative variant kept for comparability with reports
    built that way).
    """
    if spec.effects != "random":
        raise SchemaError("the effects decision test starts from a random-effects spec")
    if likelihood not in ("marginal", "conditional"):
        raise SchemaError(f"unknown likelihood choice {likelihood!r}")
    base_settings = settings or FitSettings()
    ml = replace(base_settings, method="ml")

    base = fit_amm(build_design(panel, spec), ml)
    augmented_bundle = build_design(panel, spec.with_effects("mundlak"))
    # same penalized structure, so the base optimum is a good starting point
    augmented = fit_amm(
        augmented_bundle, ml, theta_init=base.theta, v_init=base.relative_unit_variances
    )
    df = sum(
        len(t.x_cols) for t in augmented_bundle.terms if t.kind == "mundlak_avg"
    )
    if not augmented.converged or not base.converged:
        return MundlakResult(
            t_lrt=math.nan,
            df=df,
            p_value=math.nan,
            decision="fixed",
            inconclusive=True,
            note="augmented or base fit did not converge; defaulting to fixed effects",
        )
    if likelihood == "marginal":
        t_lrt = 2.0 * (augmented.marginal_loglik - base.marginal_loglik)
    else:
        t_lrt = 2.0 * (augmented.cond_loglik - base.cond_loglik)
    if t_lrt < 0.0:
        if t_lrt < -1e-6:
            warnings.warn(
                f"negative likelihood-ratio statistic {t_lrt:.3g} floored at 0",
                stacklevel=2,
            )
        t_lrt = 0.0
    p = float(chi2.sf(t_lrt, df)) if df > 0 else 1.0
    decision = "fixed" if p < 0.05 else "random"
    return MundlakResult(t_lrt=float(t_lrt), df=df, p_value=p, decision=decision)


# ---------------------------------------------------------------------------
# Tournament


@dataclass(frozen=True)
class SubsampleFilter:
    countries: tuple[str, ...] | None = None
    years: tuple[int, int] | None = None

    @property
    def id(self) -> str:
        parts = []
        if self.countries is not None:
            parts.append(f"countries={len(self.countries)}")
        if self.years is not None:
            parts.append(f"years={self.years[0]}-{self.years[1]}")
        return ";".join(parts) if parts else "full"

    def apply(self, panel: PanelDataset) -> PanelDataset:
        if self.countries is None and self.years is None:
            return panel
        return panel.subset(units=self.countries, years=self.years)


@dataclass
class GroupConfig:
    specs: list[ModelSpec]
    subsample: SubsampleFilter = field(default_factory=SubsampleFilter)


@dataclass
class CandidateResult:
    label: str
    group: str
    subsample_id: str
    n_obs: int
    effects_mode: str
    mundlak_p: float | None
    report: CaicReport | None
    caic: float
    converged: bool
    error: str | None = None
    fit: FittedAMM | None = None
    spec: ModelSpec | None = None

    def row(self) -> dict:
        rep = self.report
        return {
            "label": self.label,
            "group": self.group,
            "subsample": self.subsample_id,
            "n_obs": self.n_obs,
            "effects_mode": self.effects_mode,
            "mundlak_p": self.mundlak_p,
            "cond_loglik": rep.cond_loglik if rep else math.nan,
            "trace": rep.trace if rep else math.nan,
            "r": rep.r if rep else 0,
            "caic": self.caic,
            "converged": self.converged,
            "error": self.error or "",
        }


@dataclass
class Comparison:
    stage: str
    subsample_id: str
    labels: tuple[str, ...]
    caics: tuple[float, ...]
    winner: str


@dataclass
class SelectionOutcome:
    groups: dict[str, list[CandidateResult]] = field(default_factory=dict)
    first_stage_winners: dict[str, CandidateResult | None] = field(default_factory=dict)
    pool: list[CandidateResult] = field(default_factory=list)
    deferred: list[CandidateResult] = field(default_factory=list)
    pool_winner: str | None = None
    overall_winner: str | None = None
    comparisons: list[Comparison] = field(default_factory=list)

    def all_candidates(self) -> list[CandidateResult]:
        out = [c for results in self.groups.values() for c in results]
        seen = {id(c) for c in out}
        for c in self.pool + self.deferred:
            if id(c) not in seen:
                out.append(c)
        return out


def _evaluate_spec(
    panel: PanelDataset,
    spec: ModelSpec,
    group: str,
    subsample_id: str,
    settings: FitSettings,
    caic_backend: str,
    use_mundlak: bool,
    keep_fit: bool = False,
) -> CandidateResult:
    """Fit one candidate on one panel: decide the effects mode, fit, score.
    Any failure becomes a +inf sentinel so the tournament can continue."""
    mundlak_p = None
    try:
        mode = spec.effects
        if mode == "random" and use_mundlak:
            decision = mundlak_lrt(panel, spec, settings)
            mundlak_p = decision.p_value
            mode = decision.decision
        fit = fit_amm(build_design(panel, spec.with_effects(mode)), settings)
        report = conditional_aic(fit, backend=caic_backend)
        return CandidateResult(
            label=spec.label,
            group=group,
            subsample_id=subsample_id,
            n_obs=panel.n_obs,
            effects_mode=mode,
            mundlak_p=mundlak_p,
            report=report,
            caic=report.caic,
            converged=fit.converged,
            fit=fit if keep_fit else None,
            spec=spec,
        )
    except PanelAmmError as exc:
        return CandidateResult(
            label=spec.label,
            group=group,
            subsample_id=subsample_id,
            n_obs=panel.n_obs,
            effects_mode=spec.effects,
            mundlak_p=mundlak_p,
            report=None,
            caic=math.inf,
            converged=False,
            error=str(exc),
            spec=spec,
        )


def _argmin_candidate(results: Sequence[CandidateResult]) -> CandidateResult | None:
    """Lowest finite cAIC; ties (within 1e-9) go to the earliest entry."""
    best = None
    for cand in results:
        if not math.isfinite(cand.caic):
            continue
        if best is None or cand.caic < best.caic - TIE_RESOLUTION:
            best = cand
    return best


def _evaluate_task(args) -> CandidateResult:
    return _evaluate_spec(*args)


def run_first_stage(
    panel: PanelDataset,
    groups: Mapping[str, GroupConfig],
    settings: FitSettings | None = None,
    caic_backend: str = "plugin_hat",
    use_mundlak: bool = True,
    jobs: int = 1,
) -> SelectionOutcome:
    """Per theory group: decide effects per spec, fit, score, and keep the
    group's cAIC minimizer.  Groups restricted to subsamples are marked so
    the second stage knows their scores are not directly comparable.

    Candidate fits are independent; ``jobs`` > 1 runs them in worker
    processes.  Aggregation happens in the declared order, so results do
    not depend on completion order.
    """
    settings = settings or FitSettings()
    outcome = SelectionOutcome()
    tasks: list[tuple] = []
    sizes: list[tuple[str, int]] = []
    for group_label, config in groups.items():
        if not config.specs:
            raise SchemaError(f"group {group_label!r} has no candidate specs")
        sub_panel = config.subsample.apply(panel)
        for spec in config.specs:
            tasks.append(
                (
                    sub_panel,
                    spec,
                    group_label,
                    config.subsample.id,
                    settings,
                    caic_backend,
                    use_mundlak,
                )
            )
        sizes.append((group_label, len(config.specs)))
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            flat = list(pool.map(_evaluate_task, tasks))
    else:
        flat = [_evaluate_task(t) for t in tasks]
    offset = 0
    for group_label, n_specs in sizes:
        results = flat[offset : offset + n_specs]
        offset += n_specs
        outcome.groups[group_label] = results
        winner = _argmin_candidate(results)
        outcome.first_stage_winners[group_label] = winner
        outcome.comparisons.append(
            Comparison(
                stage="first",
                subsample_id=groups[group_label].subsample.id,
                labels=tuple(r.label for r in results),
                caics=tuple(r.caic for r in results),
                winner=winner.label if winner else "(all failed)",
            )
        )
    return outcome


def run_second_stage(
    outcome: SelectionOutcome,
    boosted_spec: ModelSpec | None,
    full_panel: PanelDataset,
    groups: Mapping[str, GroupConfig],
    settings: FitSettings | None = None,
    caic_backend: str = "plugin_hat",
    use_mundlak: bool = True,
) -> SelectionOutcome:
    """Pool the first-stage winners (refit on the full panel where their
    predictors allow it) with the boosted model, then defend the pool
    winner against each subsample-only winner on that winner's subsample.

    Scores from different observation sets are never compared directly:
    every comparison happens on a shared panel, with failed fits carrying
    a +inf sentinel.
    """
    settings = settings or FitSettings()
    pool: list[CandidateResult] = []
    deferred: list[CandidateResult] = []
    for group_label, winner in outcome.first_stage_winners.items():
        if winner is None:
            continue
        on_subsample = winner.subsample_id != "full"
        if not on_subsample:
            pool.append(winner)
        elif full_panel.complete_columns(winner.spec.covariate_columns):
            refit = _evaluate_spec(
                full_panel,
                winner.spec,
                group_label,
                "full",
                settings,
                caic_backend,
                use_mundlak,
            )
            pool.append(refit)
        else:
            deferred.append(winner)
    if boosted_spec is not None:
        pool.append(
            _evaluate_spec(
                full_panel,
                boosted_spec,
                "boosting",
                "full",
                settings,
                caic_backend,
                use_mundlak=False,  # boosting already decided on fixed effects
                keep_fit=True,
            )
        )

    outcome.pool = pool
    outcome.deferred = deferred
    champion = _argmin_candidate(pool)
    outcome.comparisons.append(
        Comparison(
            stage="pool",
            subsample_id="full",
            labels=tuple(c.label for c in pool),
            caics=tuple(c.caic for c in pool),
            winner=champion.label if champion else "(all failed)",
        )
    )
    if champion is None:
        outcome.pool_winner = None
        outcome.overall_winner = None
        return outcome
    outcome.pool_winner = champion.label

    for contender in deferred:
        sub_filter = groups[contender.group].subsample
        sub_panel = sub_filter.apply(full_panel)
        champ_on_sub = _evaluate_spec(
            sub_panel,
            champion.spec,
            champion.group,
            contender.subsample_id,
            settings,
            caic_backend,
            use_mundlak,
        )
        pair = [champ_on_sub, contender]
        winner = _argmin_candidate(pair)
        outcome.comparisons.append(
            Comparison(
                stage="second",
                subsample_id=contender.subsample_id,
                labels=(champ_on_sub.label, contender.label),
                caics=(champ_on_sub.caic, contender.caic),
                winner=winner.label if winner else champion.label,
            )
        )
        if winner is contender:
            champion = contender
    outcome.overall_winner = champion.label
    return outcome


def run_tournament(
    panel: PanelDataset,
    groups: Mapping[str, GroupConfig],
    boosted_spec: ModelSpec | None = None,
    settings: FitSettings | None = None,
    caic_backend: str = "plugin_hat",
    use_mundlak: bool = True,
    jobs: int = 1,
) -> SelectionOutcome:
    outcome = run_first_stage(panel, groups, settings, caic_backend, use_mundlak, jobs=jobs)
    return run_second_stage(
        outcome, boosted_spec, panel, groups, settings, caic_backend, use_mundlak
    )


# ---------------------------------------------------------------------------
# Varying coefficients around a break year


@dataclass
class PeriodEstimate:
    term: str
    period: str
    kind: str
    coefficients: np.ndarray
    edf: float
    p_value: float
    code: str


@dataclass
class VaryingCoefFit:
    fit: FittedAMM
    break_year: int
    estimates: list[PeriodEstimate]
    dropped: list[str]

    def by_term(self) -> dict[tuple[str, str], PeriodEstimate]:
        return {(e.term, e.period): e for e in self.estimates}


def fit_varying_coefficients(
    spec: ModelSpec,
    panel: PanelDataset,
    break_year: int,
    settings: FitSettings | None = None,
) -> VaryingCoefFit:
    """Refit a spec with every covariate term interacted with the pre/post
    break indicator; the unit part and every other setting stay as in the
    base spec.  Terms without variation inside a period are dropped and
    annotated."""
    if not (panel.times[0] <= break_year < panel.times[-1]):
        raise StructuralError(
            f"break year {break_year} must leave both periods non-empty on "
            f"{panel.times[0]}..{panel.times[-1]}"
        )
    bundle = build_design(panel, spec, break_year=break_year)
    fitted = fit_amm(bundle, settings)
    estimates = []
    for term in bundle.terms:
        if term.period is None:
            continue
        test = term_significance(fitted, term.name)
        base = term.name.rsplit(":", 1)[0]
        estimates.append(
            PeriodEstimate(
                term=base,
                period=term.period,
                kind=term.kind,
                coefficients=fitted.term_coefficients(term.name),
                edf=fitted.edf_by_term[term.name],
                p_value=test.p_value,
                code=test.code,
            )
        )
    dropped = [a for a in bundle.annotations if "no variation in period" in a]
    return VaryingCoefFit(
        fit=fitted, break_year=break_year, estimates=estimates, dropped=dropped
    )
