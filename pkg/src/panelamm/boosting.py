"""Component-wise functional gradient boosting with adaptive Huber loss.

Base learners are small penalized regressions: a P-spline per continuous
column, a ridge on the dummy expansion per categorical column, a
bivariate tensor P-spline per declared pair, and ridge-penalized per-unit
intercepts and slopes.  Each learner's penalty is calibrated so its
unweighted hat-matrix trace equals a common df target, keeping the
selection fair across learner kinds.

At each iteration the loss threshold adapts to the fit: delta_m is the
(weighted) median absolute residual, the negative gradient is the
residual clipped at delta_m, every learner is fit to that gradient by
penalized least squares, and the best fit (smallest weighted squared
error) is added with step length nu.

Early stopping draws bootstrap resamples within every unit (so each fold
keeps all units in its training weights), tracks out-of-bag risk per
iteration with the fold's own delta, and picks the iteration minimizing
the across-fold mean.  Selection frequencies over the stopped path feed
the distilled model spec that the mixed-model engine refits, undoing the
shrinkage of early stopping.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import brentq

from .basis import bspline_basis, sum_to_zero_transform, tensor_product
from .errors import DimensionError, DomainError, SchemaError, StructuralError
from .modelspec import ModelSpec, SmoothTerm, TensorTerm
from .panel import CategoricalColumn, NumericColumn, PanelDataset

LEARNER_KINDS = (
    "pspline",
    "ridge_categorical",
    "tensor_pspline",
    "random_intercept",
    "random_slope",
)


@dataclass(frozen=True)
class BoostConfig:
    nu: float = 0.1
    m_max: int = 1500
    folds: int = 10
    df_target: float = 4.0
    threshold: float = 0.01
    seed: int = 0
    tensor_pairs: tuple[tuple[str, str], ...] = ()
    k: int = 10
    tensor_k: tuple[int, int] = (5, 5)
    include_time: bool = False
    label: str = "M_B"
    heteroscedastic: bool = False

    @classmethod
    def from_dict(cls, raw: dict) -> "BoostConfig":
        pairs = tuple(tuple(p) for p in raw.get("tensor_pairs", []))
        for p in pairs:
            if len(p) != 2:
                raise SchemaError(f"tensor_pairs entries must have two columns, got {p}")
        return cls(
            nu=float(raw.get("nu", 0.1)),
            m_max=int(raw.get("m_max", 1500)),
            folds=int(raw.get("folds", 10)),
            df_target=float(raw.get("df_target", 4.0)),
            threshold=float(raw.get("threshold", 0.01)),
            seed=int(raw.get("seed", 0)),
            tensor_pairs=pairs,
            k=int(raw.get("k", 10)),
            tensor_k=tuple(raw.get("tensor_k", (5, 5))),
            include_time=bool(raw.get("include_time", False)),
            label=raw.get("label", "M_B"),
            heteroscedastic=bool(raw.get("heteroscedastic", False)),
        )


def huber_loss(residuals: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(residuals)
    return np.where(a <= delta, 0.5 * residuals**2, delta * (a - 0.5 * delta))


def huber_gradient(y: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, float]:
    """Negative gradient of the Huber loss at the adaptive threshold
    delta = median |y - f|: the residual, clipped at +-delta."""
    y = np.asarray(y, dtype=float)
    f = np.asarray(f, dtype=float)
    if y.shape != f.shape:
        raise DimensionError("y and f must have the same length")
    resid = y - f
    delta = float(np.median(np.abs(resid)))
    return np.clip(resid, -delta, delta), delta


def weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    """Median under observation weights; reduces to np.median (mid-point
    averaging) for unit weights.  Zero-weight entries are ignored."""
    mask = weights > 0
    v = np.asarray(values, dtype=float)[mask]
    w = np.asarray(weights, dtype=float)[mask]
    if v.size == 0:
        raise DomainError("weighted median of an empty (all zero-weight) sample")
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    cw = np.cumsum(w)
    half = 0.5 * cw[-1]
    i = int(np.searchsorted(cw, half))
    if cw[i] == half and i + 1 < v.size:
        return 0.5 * (v[i] + v[i + 1])
    return float(v[i])


# ---------------------------------------------------------------------------
# Base learners


@dataclass
class BaseLearner:
    """One boosting component.  Dense learners carry a design and penalty;
    group learners (categoricals, unit intercepts/slopes) exploit their
    diagonal normal equations."""

    name: str
    kind: str
    columns: tuple[str, ...]
    df_target: float
    lam: float = 0.0
    Z: np.ndarray | None = None
    penalty: np.ndarray | None = None
    groups: np.ndarray | None = None
    values: np.ndarray | None = None
    n_groups: int = 0
    k: tuple[int, ...] = ()
    saturated: bool = False

    @property
    def is_group(self) -> bool:
        return self.groups is not None

    def hat_trace(self, lam: float, weights: np.ndarray | None = None) -> float:
        n = (self.Z.shape[0] if self.Z is not None else self.groups.shape[0])
        w = np.ones(n) if weights is None else weights
        if self.is_group:
            d = np.bincount(self.groups, weights=w * self.values**2, minlength=self.n_groups)
            return float(np.sum(d / (d + lam)))
        ZtWZ = self.Z.T @ (self.Z * w[:, None])
        M = ZtWZ + lam * self.penalty
        return float(np.trace(np.linalg.solve(M, ZtWZ)))

    def calibrate(self, df_target: float) -> None:
        """Pick the penalty weight so the unweighted hat trace equals
        df_target; saturates at lam=0 when the learner cannot reach it."""
        self.df_target = df_target
        max_df = self.hat_trace(0.0) if self.is_group else self.hat_trace(1e-12)
        if df_target >= max_df - 1e-9:
            self.lam = 0.0
            self.saturated = True
            if df_target > max_df + 1e-9:
                warnings.warn(
                    f"learner {self.name!r}: df target {df_target} above its "
                    f"maximum {max_df:.3f}; left unpenalized",
                    stacklevel=3,
                )
            return
        min_df = 0.0 if self.is_group else self._null_dim()
        if df_target <= min_df:
            raise DomainError(
                f"learner {self.name!r}: df target {df_target} not above the "
                f"penalty null-space dimension {min_df}"
            )
        lo, hi = -12.0, 12.0
        while self.hat_trace(10.0**hi) > df_target and hi < 30:
            hi += 4.0
        self.lam = 10.0 ** brentq(
            lambda loglam: self.hat_trace(10.0**loglam) - df_target, lo, hi, xtol=1e-12
        )

    def _null_dim(self) -> int:
        vals = np.linalg.eigvalsh(self.penalty)
        return int(np.sum(vals <= 1e-10 * max(vals[-1], 1e-300)))

    def prepare(self, weights: np.ndarray) -> "_Fitter":
        if self.is_group:
            d = np.bincount(
                self.groups, weights=weights * self.values**2, minlength=self.n_groups
            )
            return _GroupFitter(self, d + self.lam)
        A = self.Z.T @ (self.Z * weights[:, None]) + self.lam * self.penalty
        jitter = 1e-10 * max(float(np.mean(np.diag(A))), 1e-30)
        try:
            cho = cho_factor(A, lower=True)
        except np.linalg.LinAlgError:
            cho = cho_factor(A + jitter * np.eye(A.shape[0]), lower=True)
        return _DenseFitter(self, cho)


class _DenseFitter:
    def __init__(self, learner: BaseLearner, cho):
        self.learner = learner
        self.cho = cho

    def fit(self, wu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        coef = cho_solve(self.cho, self.learner.Z.T @ wu)
        return coef, self.learner.Z @ coef


class _GroupFitter:
    def __init__(self, learner: BaseLearner, denom: np.ndarray):
        self.learner = learner
        self.denom = np.maximum(denom, 1e-300)

    def fit(self, wu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lrn = self.learner
        coef = (
            np.bincount(lrn.groups, weights=lrn.values * wu, minlength=lrn.n_groups)
            / self.denom
        )
        return coef, coef[lrn.groups] * lrn.values


def _centered_spline(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    block = bspline_basis(x, k=k)
    Q = sum_to_zero_transform(block.design.sum(axis=0))
    return block.design @ Q, Q.T @ block.penalty @ Q


def _centered_tensor(
    x: np.ndarray, z: np.ndarray, k1: int, k2: int
) -> tuple[np.ndarray, np.ndarray]:
    tb = tensor_product(bspline_basis(x, k=k1), bspline_basis(z, k=k2))
    Q = sum_to_zero_transform(tb.design.sum(axis=0))
    # one isotropic penalty (sum of the margins) so a single df knob exists
    P = Q.T @ (tb.penalties[0] + tb.penalties[1]) @ Q
    return tb.design @ Q, P


def make_base_learners(
    panel: PanelDataset,
    pairs: list[tuple[str, str]] | None = None,
    df_target: float = 4.0,
    k: int = 10,
    tensor_k: tuple[int, int] = (5, 5),
    include_time: bool = False,
) -> list[BaseLearner]:
    """One learner per usable covariate column, one per tensor pair, plus
    the unit intercept and slope learners, all calibrated to df_target.

    Columns that are constant or carry missing cells are skipped with a
    warning.
    """
    learners: list[BaseLearner] = []
    for name, col in panel.columns.items():
        if isinstance(col, NumericColumn):
            if np.isnan(col.values).any():
                warnings.warn(f"column {name!r} has missing cells; learner skipped", stacklevel=2)
                continue
            if np.ptp(col.values) == 0.0:
                warnings.warn(f"column {name!r} is constant; learner skipped", stacklevel=2)
                continue
            Z, P = _centered_spline(col.values, k)
            learners.append(
                BaseLearner(
                    name=f"s({name})", kind="pspline", columns=(name,),
                    df_target=df_target, Z=Z, penalty=P, k=(k,),
                )
            )
        elif isinstance(col, CategoricalColumn):
            if (col.codes < 0).any():
                warnings.warn(f"column {name!r} has missing cells; learner skipped", stacklevel=2)
                continue
            present = np.unique(col.codes)
            if present.size < 2:
                warnings.warn(f"column {name!r} has a single level; learner skipped", stacklevel=2)
                continue
            learners.append(
                BaseLearner(
                    name=f"ridge({name})", kind="ridge_categorical", columns=(name,),
                    df_target=df_target, groups=col.codes,
                    values=np.ones(panel.n_obs), n_groups=len(col.levels),
                )
            )
    for a, b in pairs or []:
        xa, xb = panel.numeric(a), panel.numeric(b)
        if np.isnan(xa).any() or np.isnan(xb).any():
            warnings.warn(f"pair ({a},{b}) has missing cells; learner skipped", stacklevel=2)
            continue
        Z, P = _centered_tensor(xa, xb, *tensor_k)
        learners.append(
            BaseLearner(
                name=f"te({a},{b})", kind="tensor_pspline", columns=(a, b),
                df_target=df_target, Z=Z, penalty=P, k=tensor_k,
            )
        )
    if include_time:
        Z, P = _centered_spline(panel.time_values.astype(float), k)
        learners.append(
            BaseLearner(
                name=f"s({panel.time_name})", kind="pspline",
                columns=(panel.time_name,), df_target=df_target, Z=Z, penalty=P, k=(k,),
            )
        )
    learners.append(
        BaseLearner(
            name="unit_intercept", kind="random_intercept", columns=(),
            df_target=df_target, groups=panel.unit_index,
            values=np.ones(panel.n_obs), n_groups=panel.n_units,
        )
    )
    t = panel.t_index.astype(float)
    if np.ptp(t) > 0:
        learners.append(
            BaseLearner(
                name="unit_slope", kind="random_slope", columns=(),
                df_target=df_target, groups=panel.unit_index,
                values=t, n_groups=panel.n_units,
            )
        )
    else:
        warnings.warn("single time point; unit slope learner skipped", stacklevel=2)
    for lrn in learners:
        lrn.calibrate(df_target)
    return learners


# ---------------------------------------------------------------------------
# The boosting path


@dataclass
class BoostPath:
    learner_names: list[str]
    selections: np.ndarray        # learner index per iteration
    deltas: np.ndarray            # adaptive Huber threshold per iteration
    risks: np.ndarray             # in-sample risk per iteration (fixed reference threshold)
    coefficients: list[np.ndarray]
    nu: float
    offset: float
    seed: int | None = None
    m_stop: int | None = None
    fold_risks: np.ndarray | None = None  # (folds, m_max) out-of-bag curves
    mean_oob_risk: np.ndarray | None = None

    @property
    def n_iterations(self) -> int:
        return len(self.selections)

    def selection_counts(self, m: int | None = None) -> np.ndarray:
        m = self.n_iterations if m is None else m
        return np.bincount(self.selections[:m], minlength=len(self.learner_names))

    def aggregate_coefficients(self, m: int | None = None) -> dict[str, np.ndarray]:
        """Summed nu-scaled updates per learner over the first m iterations:
        the additive-model coefficients the path has accumulated."""
        m = self.n_iterations if m is None else m
        out: dict[str, np.ndarray] = {}
        for i in range(m):
            name = self.learner_names[self.selections[i]]
            upd = self.nu * self.coefficients[i]
            out[name] = out.get(name, 0.0) + upd
        return out


def _boost_core(
    y: np.ndarray,
    learners: list[BaseLearner],
    nu: float,
    m_max: int,
    weights: np.ndarray,
    oob_mask: np.ndarray | None = None,
    delta_override: float | None = None,
):
    """Shared loop for the full path and the bootstrap folds.  Returns the
    per-iteration records plus the out-of-bag risk curve when asked.

    The gradient uses the adaptive threshold delta_m (median absolute
    residual) each iteration; recorded risks evaluate the Huber loss at
    the run's initial threshold, held fixed.  Risks at iteration-specific
    thresholds are not comparable across iterations (the threshold itself
    shrinks as the fit improves, which would drag any argmin over m to
    m_max), so both the in-sample trajectory and the out-of-bag curves
    use the fixed reference threshold.
    """
    fitters = [lrn.prepare(weights) for lrn in learners]
    f = np.full_like(y, weighted_median(y, weights))
    offset = f[0]
    delta_ref = (
        weighted_median(np.abs(y - f), weights)
        if delta_override is None
        else delta_override
    )
    selections, deltas, risks, coefs = [], [], [], []
    oob = np.full(m_max, np.nan) if oob_mask is not None else None
    wsum = float(weights.sum())
    for m in range(m_max):
        resid = y - f
        delta = (
            weighted_median(np.abs(resid), weights)
            if delta_override is None
            else delta_override
        )
        if delta == 0.0:
            break
        u = np.clip(resid, -delta, delta)
        wu = weights * u
        best, best_sse, best_coef, best_fit = -1, np.inf, None, None
        for j, fitter in enumerate(fitters):
            coef, fit = fitter.fit(wu)
            sse = float(weights @ (u - fit) ** 2)
            if sse < best_sse - 1e-12:
                best, best_sse, best_coef, best_fit = j, sse, coef, fit
        f = f + nu * best_fit
        selections.append(best)
        deltas.append(delta)
        risks.append(float(weights @ huber_loss(y - f, delta_ref)) / wsum)
        coefs.append(best_coef)
        if oob is not None:
            oob[m] = float(np.mean(huber_loss((y - f)[oob_mask], delta_ref)))
    return selections, deltas, risks, coefs, offset, oob


def boost(
    panel: PanelDataset,
    learners: list[BaseLearner],
    nu: float = 0.1,
    m_max: int = 1500,
    seed: int | None = None,
    weights: np.ndarray | None = None,
    delta_override: float | None = None,
) -> BoostPath:
    """Run the component-wise gradient descent on the panel's response.

    The loop itself is deterministic; ``seed`` is recorded for provenance
    only (randomness lives in the fold resampling of choose_mstop).
    """
    if m_max <= 0:
        raise SchemaError(f"m_max must be positive, got {m_max}")
    if not 0.0 < nu <= 1.0:
        raise SchemaError(f"step length nu must be in (0, 1], got {nu}")
    if not learners:
        raise SchemaError("no base learners supplied")
    y = panel.response
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    selections, deltas, risks, coefs, offset, _ = _boost_core(
        y, learners, nu, m_max, w, delta_override=delta_override
    )
    return BoostPath(
        learner_names=[l.name for l in learners],
        selections=np.asarray(selections, dtype=int),
        deltas=np.asarray(deltas),
        risks=np.asarray(risks),
        coefficients=coefs,
        nu=nu,
        offset=float(offset),
        seed=seed,
    )


def _draw_fold_weights(rng: np.random.Generator, panel: PanelDataset) -> np.ndarray:
    """Bootstrap resampling weights drawn within each unit, so every unit
    stays represented in the fold's training set."""
    nt = panel.n_times
    counts = np.empty(panel.n_obs)
    for i in range(panel.n_units):
        draw = rng.integers(0, nt, size=nt)
        counts[i * nt : (i + 1) * nt] = np.bincount(draw, minlength=nt)
    return counts


@dataclass
class MstopResult:
    m_stop: int
    fold_risks: np.ndarray
    mean_oob_risk: np.ndarray


def choose_mstop(
    panel: PanelDataset,
    learners: list[BaseLearner],
    nu: float = 0.1,
    m_max: int = 1500,
    folds: int = 10,
    seed: int = 0,
) -> MstopResult:
    """Unit-stratified bootstrap early stopping: the chosen iteration
    minimizes the out-of-bag Huber risk averaged over the folds."""
    if panel.n_times < 2:
        raise StructuralError("early stopping needs at least 2 observations per unit")
    fold_seeds = np.random.SeedSequence(seed).spawn(folds)
    y = panel.response
    curves = np.empty((folds, m_max))
    for fold in range(folds):
        rng = np.random.default_rng(fold_seeds[fold])
        weights = None
        for _ in range(20):
            candidate = _draw_fold_weights(rng, panel)
            if (candidate == 0).any():
                weights = candidate
                break
        if weights is None:
            raise StructuralError(
                f"fold {fold}: could not draw a resample with a non-empty "
                "out-of-bag set"
            )
        oob_mask = weights == 0.0
        *_, oob = _boost_core(y, learners, nu, m_max, weights, oob_mask=oob_mask)
        last = np.nan
        for m in range(m_max):  # pad after an early exact-fit break
            if np.isnan(oob[m]):
                oob[m] = last
            else:
                last = oob[m]
        curves[fold] = oob
    mean_curve = curves.mean(axis=0)
    m_stop = int(np.nanargmin(mean_curve)) + 1
    return MstopResult(m_stop=m_stop, fold_risks=curves, mean_oob_risk=mean_curve)


# ---------------------------------------------------------------------------
# Distillation into a refittable spec


@dataclass
class DistilledSpec:
    kept: dict[str, float]  # learner name -> selection frequency
    spec: ModelSpec
    threshold: float
    frequencies: dict[str, float] = field(default_factory=dict)


def distill(
    path: BoostPath,
    threshold: float = 0.01,
    learners: list[BaseLearner] | None = None,
    label: str = "M_B",
    heteroscedastic: bool = False,
) -> DistilledSpec:
    """Keep the learners selected in at least ``threshold`` of the stopped
    iterations and translate them into a fixed-effects model spec for the
    mixed-model engine to refit (undoing the shrinkage of early stopping).
    """
    if path.m_stop is None:
        raise SchemaError("boosting path has no m_stop; run choose_mstop first")
    counts = path.selection_counts(path.m_stop)
    freqs = counts / path.m_stop
    all_freqs = {name: float(f) for name, f in zip(path.learner_names, freqs)}
    kept = {name: f for name, f in all_freqs.items() if f >= threshold and f > 0.0}
    if not kept:
        raise SchemaError(
            f"no learner reaches the {threshold:.2%} selection threshold; "
            "nothing to distill"
        )
    by_name = {l.name: l for l in learners} if learners else {}
    linear: list[str] = []
    smooth: list[SmoothTerm] = []
    tensors: list[TensorTerm] = []
    for name in path.learner_names:
        if name not in kept:
            continue
        lrn = by_name.get(name)
        if lrn is not None:
            if lrn.kind == "pspline":
                smooth.append(SmoothTerm(lrn.columns[0], lrn.k[0]))
            elif lrn.kind == "ridge_categorical":
                linear.append(lrn.columns[0])
            elif lrn.kind == "tensor_pspline":
                tensors.append(TensorTerm(lrn.columns[0], lrn.columns[1], *lrn.k))
            # unit intercept/slope learners fold into the fixed unit part
        elif name.startswith("s(") and name.endswith(")"):
            smooth.append(SmoothTerm(name[2:-1]))
        elif name.startswith("ridge(") and name.endswith(")"):
            linear.append(name[6:-1])
        elif name.startswith("te(") and name.endswith(")"):
            a, b = name[3:-1].split(",")
            tensors.append(TensorTerm(a, b))
    spec = ModelSpec(
        label=label,
        linear=tuple(linear),
        smooth=tuple(smooth),
        tensor_pairs=tuple(tensors),
        effects="fixed",
        heteroscedastic=heteroscedastic,
    )
    return DistilledSpec(
        kept=kept, spec=spec, threshold=threshold, frequencies=all_freqs
    )


def run_boosting(
    panel: PanelDataset,
    learners: list[BaseLearner],
    nu: float = 0.1,
    m_max: int = 1500,
    folds: int = 10,
    seed: int = 0,
    threshold: float = 0.01,
    label: str = "M_B",
    heteroscedastic: bool = False,
) -> tuple[BoostPath, DistilledSpec]:
    """Full data-driven route: path, early stopping, distillation."""
    path = boost(panel, learners, nu=nu, m_max=m_max, seed=seed)
    stop = choose_mstop(panel, learners, nu=nu, m_max=m_max, folds=folds, seed=seed)
    path.m_stop = min(stop.m_stop, path.n_iterations)
    path.fold_risks = stop.fold_risks
    path.mean_oob_risk = stop.mean_oob_risk
    distilled = distill(
        path, threshold, learners, label=label, heteroscedastic=heteroscedastic
    )
    return path, distilled
