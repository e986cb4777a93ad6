"""Penalized maximum-likelihood fitting of additive mixed panel models.

Coefficients solve a penalized weighted least-squares problem given the
variance parameters; smoothing parameters, the unit-effect covariance,
and (optionally) per-unit error variances are estimated by maximizing the
profiled restricted (default) or marginal likelihood.

Estimation is nested: an outer quasi-Newton search runs on the
log-transformed smoothing/covariance parameters with the overall error
scale profiled out analytically; when per-unit variances are requested
they are updated by a fixed-point sweep between outer runs, iterating the
weights until each unit's variance matches the mean of its squared
conditional residuals over its residual degrees of freedom.

Joint design column order is penalized-first, [Z_1 .. Z_q | Z_units | X],
so one Cholesky factorization of the penalized normal equations yields
both the joint and the penalized-block log-determinants.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.stats import chi2

from .design import DesignBundle, Term, term_design_rows
from .errors import DimensionError, NumericError, SchemaError
from .panel import CategoricalColumn, PanelDataset

LOG2PI = np.log(2.0 * np.pi)
MIN_UNIT_VARIANCE_RATIO = 1e-8  # floor for sigma_i^2 / sigma^2
SIGMA2_FLOOR = 1e-10            # guard for degenerate (near-interpolating) fits


@dataclass
class FitSettings:
    method: str = "reml"          # criterion for variance parameters: "reml" or "ml"
    max_outer_iter: int = 200
    outer_gtol: float = 1e-6
    variance_rounds: int = 40     # fixed-point sweeps for per-unit variances
    variance_tol: float = 1e-4
    theta_override: np.ndarray | None = None          # fix all log variance parameters
    unit_variance_override: np.ndarray | None = None  # fix relative unit variances v_i


@dataclass
class FitDiagnostics:
    converged: bool = True
    outer_iterations: int = 0
    grad_inf_norm: float = 0.0
    objective_path: list[float] = field(default_factory=list)
    variance_rounds: int = 0
    jitter_events: int = 0
    messages: list[str] = field(default_factory=list)


@dataclass
class TermTest:
    term: str
    statistic: float
    df: int
    p_value: float
    code: str
    note: str = ""


@dataclass
class EffectCurve:
    term: str
    grid: np.ndarray
    effect: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    rug: np.ndarray
    edf: float


@dataclass
class EffectSurface:
    term: str
    grid_x: np.ndarray
    grid_z: np.ndarray
    effect: np.ndarray  # flattened over the (x, z) grid, x-major
    lower: np.ndarray
    upper: np.ndarray
    edf: float


def _projected_grad_norm(x: np.ndarray, grad: np.ndarray | None, bounds) -> float:
    """Infinity norm of the gradient with components that push into an
    active bound zeroed (those directions are not free to move)."""
    if grad is None:
        return np.inf
    proj = np.asarray(grad, dtype=float).copy()
    for j, (lo, hi) in enumerate(bounds):
        if x[j] <= lo + 1e-10 and proj[j] > 0:
            proj[j] = 0.0
        if x[j] >= hi - 1e-10 and proj[j] < 0:
            proj[j] = 0.0
    return float(np.max(np.abs(proj))) if proj.size else 0.0


def significance_code(p: float) -> str:
    if not np.isfinite(p):
        return ""
    if p <= 0.001:
        return "***"
    if p <= 0.01:
        return "**"
    if p <= 0.05:
        return "*"
    if p <= 0.1:
        return "."
    return ""


class _Layout:
    """Column layout of the joint design [Z_1 .. Z_q | Z_units | X]."""

    def __init__(self, bundle: DesignBundle):
        self.bundle = bundle
        parts = []
        self.block_start: list[int] = []
        off = 0
        for blk in bundle.blocks:
            self.block_start.append(off)
            parts.append(blk.Z)
            off += blk.n_coef
        self.unit_start = None
        if bundle.unit_design is not None:
            self.unit_start = off
            parts.append(bundle.unit_design)
            off += bundle.unit_design.shape[1]
        self.q_pen = off
        self.x_offset = off
        self.p = bundle.X.shape[1]
        parts.append(bundle.X)
        self.q = off + self.p
        self.C = np.hstack(parts) if self.q else np.zeros((bundle.n_obs, 0))
        self.n_block_lams = [blk.n_lambda for blk in bundle.blocks]
        self.n_theta = sum(self.n_block_lams) + (3 if self.unit_start is not None else 0)

    def block_slice(self, j: int) -> slice:
        start = self.block_start[j]
        return slice(start, start + self.bundle.blocks[j].n_coef)

    def block_lambdas(self, theta: np.ndarray) -> list[np.ndarray]:
        out, k = [], 0
        for m in self.n_block_lams:
            out.append(np.exp(theta[k : k + m]))
            k += m
        return out

    def gamma_chol(self, theta: np.ndarray) -> np.ndarray | None:
        """Lower Cholesky factor of the relative unit covariance G/sigma^2."""
        if self.unit_start is None:
            return None
        c0, c1, c2 = theta[-3:]
        return np.array([[np.exp(c0), 0.0], [c2, np.exp(c1)]])


def term_columns(layout: _Layout, term: Term) -> np.ndarray:
    cols = [layout.x_offset + j for j in term.x_cols]
    if term.block is not None:
        sl = layout.block_slice(term.block)
        cols += list(range(sl.start, sl.stop))
    if term.kind == "units" and term.info.get("mode") == "random":
        cols += list(range(layout.unit_start, layout.q_pen))
    return np.asarray(cols, dtype=int)


@dataclass
class FittedAMM:
    bundle: DesignBundle
    settings: FitSettings
    coefficients: np.ndarray
    theta: np.ndarray
    lambdas: dict[str, tuple[float, ...]]
    Gtilde: np.ndarray | None
    sigma2: float
    relative_unit_variances: np.ndarray  # v_i = sigma_i^2 / sigma^2
    fitted: np.ndarray
    hat_diag: np.ndarray
    edf_columns: np.ndarray
    edf_by_term: dict[str, float]
    edf_total: float
    cond_loglik: float
    marginal_loglik: float
    cov_unscaled: np.ndarray  # (C'WC + S)^{-1}; coefficient covariance is sigma2 * this
    diagnostics: FitDiagnostics
    _layout: _Layout

    @property
    def converged(self) -> bool:
        return self.diagnostics.converged

    @property
    def residuals(self) -> np.ndarray:
        return self.bundle.y - self.fitted

    @property
    def G(self) -> np.ndarray | None:
        return None if self.Gtilde is None else self.sigma2 * self.Gtilde

    @property
    def unit_variances(self) -> np.ndarray:
        return self.sigma2 * self.relative_unit_variances

    @property
    def unit_weights(self) -> np.ndarray:
        return 1.0 / self.relative_unit_variances

    @property
    def n_error_parameters(self) -> int:
        """Free parameters in the error covariance: one common variance, or
        one per unit when heteroscedastic (the scale is profiled into them)."""
        return self.bundle.n_units if self.bundle.heteroscedastic else 1

    def term_coefficients(self, name: str) -> np.ndarray:
        cols = term_columns(self._layout, self.bundle.term(name))
        return self.coefficients[cols]

    def unit_effects(self) -> dict[str, np.ndarray]:
        """Predicted (random mode) or estimated (fixed mode) per-unit
        (intercept, slope) pairs; zero for rank-dropped fixed columns."""
        out = {}
        if self._layout.unit_start is not None:
            for i, u in enumerate(self.bundle.units):
                j = self._layout.unit_start + 2 * i
                out[u] = self.coefficients[j : j + 2].copy()
        elif self.bundle.effects == "fixed":
            names = {n: i for i, n in enumerate(self.bundle.x_names)}
            for u in self.bundle.units:
                pair = np.zeros(2)
                for k, name in enumerate((f"unit[{u}]", f"unit[{u}]:t")):
                    if name in names:
                        pair[k] = self.coefficients[self._layout.x_offset + names[name]]
                out[u] = pair
        return out


class _Engine:
    def __init__(self, bundle: DesignBundle, settings: FitSettings):
        self.bundle = bundle
        self.settings = settings
        self.layout = _Layout(bundle)
        self.n = bundle.n_obs
        if self.n <= self.layout.p:
            raise DimensionError(
                f"design is not well-posed: {self.layout.p} unpenalized parameters "
                f"for {self.n} observations"
            )
        self.obs_unit = bundle.unit_index
        self.diag = FitDiagnostics()
        self._cache: tuple[bytes, float] | None = None

    # -- weights ------------------------------------------------------

    def set_relative_variances(self, v: np.ndarray) -> None:
        self.v = np.asarray(v, dtype=float)
        w = 1.0 / self.v[self.obs_unit]
        self._w_obs = w
        C = self.layout.C
        WC = C * w[:, None]
        self._G0 = C.T @ WC
        self._bvec = WC.T @ self.bundle.y
        self._yy = float(self.bundle.y @ (w * self.bundle.y))
        self._logw = float(np.sum(np.log(w)))
        self._cache = None

    # -- penalty assembly ----------------------------------------------

    def _gamma_pieces(self, theta: np.ndarray):
        L = self.layout.gamma_chol(theta)
        Gt = L @ L.T
        det = Gt[0, 0] * Gt[1, 1] - Gt[0, 1] ** 2
        Ginv = np.array([[Gt[1, 1], -Gt[0, 1]], [-Gt[0, 1], Gt[0, 0]]]) / det
        return L, Gt, Ginv, det

    def _apply_penalty(self, A: np.ndarray, theta: np.ndarray) -> float:
        """Add S(theta) onto A in place; return log|S| over penalized coords."""
        lay = self.layout
        logdet = 0.0
        lams = lay.block_lambdas(theta)
        for j, blk in enumerate(self.bundle.blocks):
            sl = lay.block_slice(j)
            if blk.penalties is None:
                lam = lams[j][0]
                idx = np.arange(sl.start, sl.stop)
                A[idx, idx] += lam
                logdet += blk.n_coef * np.log(lam)
            else:
                M = sum(l * P for l, P in zip(lams[j], blk.penalties))
                A[sl, sl] += M
                sign, ld = np.linalg.slogdet(M)
                if sign <= 0:
                    raise NumericError(f"penalty of block {blk.name!r} is singular")
                logdet += ld
        if lay.unit_start is not None:
            _, _, Ginv, det = self._gamma_pieces(theta)
            nu = self.bundle.n_units
            even = lay.unit_start + 2 * np.arange(nu)
            A[even, even] += Ginv[0, 0]
            A[even + 1, even + 1] += Ginv[1, 1]
            A[even, even + 1] += Ginv[0, 1]
            A[even + 1, even] += Ginv[0, 1]
            logdet += -nu * np.log(det)
        return logdet

    def _penalty_matrix(self, theta: np.ndarray) -> np.ndarray:
        S = np.zeros((self.layout.q, self.layout.q))
        self._apply_penalty(S, theta)
        return S

    def _chol(self, A: np.ndarray):
        scale = max(float(np.mean(np.diag(A))), 1e-30)
        jitter = 0.0
        for attempt in range(6):
            try:
                return cho_factor(A + jitter * np.eye(A.shape[0]), lower=True)
            except LinAlgError:
                self.diag.jitter_events += 1
                jitter = scale * 1e-10 * (10.0**attempt) if jitter == 0.0 else jitter * 10.0
        raise NumericError("joint penalized normal equations are not positive definite")

    # -- profiled criterion and its gradient -----------------------------

    def _core(self, theta: np.ndarray):
        A = self._G0.copy()
        logdet_s = self._apply_penalty(A, theta)
        cho = self._chol(A)
        dhat = cho_solve(cho, self._bvec)
        Q = max(self._yy - float(dhat @ self._bvec), 1e-300)
        return A, cho, dhat, Q, logdet_s

    def _value(self, theta, cho, Q, logdet_s) -> float:
        n, p, qz = self.n, self.layout.p, self.layout.q_pen
        ldiag = np.log(np.diag(cho[0]))
        if self.settings.method == "reml":
            sigma2 = Q / (n - p)
            return (
                (n - p) * (LOG2PI + np.log(sigma2) + 1.0)
                + 2.0 * float(ldiag.sum())
                - logdet_s
                - self._logw
            )
        sigma2 = Q / n
        # leading block of the factor is the Cholesky of the penalized system
        return (
            n * (LOG2PI + np.log(sigma2) + 1.0)
            + 2.0 * float(ldiag[:qz].sum())
            - logdet_s
            - self._logw
        )

    def objective(self, theta: np.ndarray) -> float:
        key = np.asarray(theta, dtype=float).tobytes()
        if self._cache is not None and self._cache[0] == key:
            return self._cache[1]
        try:
            _, cho, _, Q, logdet_s = self._core(theta)
            val = self._value(theta, cho, Q, logdet_s)
        except NumericError:
            val = 1e12
        self._cache = (key, val)
        return val

    def objective_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        try:
            A, cho, dhat, Q, logdet_s = self._core(theta)
        except NumericError:
            return 1e12, np.zeros_like(theta)
        val = self._value(theta, cho, Q, logdet_s)
        self._cache = (np.asarray(theta, dtype=float).tobytes(), val)

        lay = self.layout
        n, p, qz = self.n, lay.p, lay.q_pen
        scale = (n - p) / Q if self.settings.method == "reml" else n / Q
        if self.settings.method == "reml":
            Ainv = cho_solve(cho, np.eye(lay.q))
            Tr = Ainv
        else:
            Lz = cho[0][:qz, :qz]
            Tr = cho_solve((Lz, True), np.eye(qz))

        grad = np.empty(lay.n_theta)
        lams = lay.block_lambdas(theta)
        k = 0
        for j, blk in enumerate(self.bundle.blocks):
            sl = lay.block_slice(j)
            dj = dhat[sl]
            Tjj = Tr[sl, sl]
            if blk.penalties is None:
                lam = lams[j][0]
                grad[k] = (
                    scale * lam * float(dj @ dj)
                    + lam * float(np.trace(Tjj))
                    - blk.n_coef
                )
                k += 1
            else:
                M = sum(l * P for l, P in zip(lams[j], blk.penalties))
                Minv = np.linalg.inv(M)
                for i, P in enumerate(blk.penalties):
                    lam = lams[j][i]
                    grad[k] = lam * (
                        scale * float(dj @ P @ dj)
                        + float(np.sum(Tjj * P))
                        - float(np.sum(Minv * P))
                    )
                    k += 1
        if lay.unit_start is not None:
            L, Gt, Ginv, _ = self._gamma_pieces(theta)
            nu = self.bundle.n_units
            U = dhat[lay.unit_start : lay.unit_start + 2 * nu].reshape(nu, 2)
            Uhat = U.T @ U
            Bsum = np.zeros((2, 2))
            base = lay.unit_start
            sub = Tr[base : base + 2 * nu, base : base + 2 * nu]
            idx = 2 * np.arange(nu)
            Bsum[0, 0] = sub[idx, idx].sum()
            Bsum[1, 1] = sub[idx + 1, idx + 1].sum()
            Bsum[0, 1] = Bsum[1, 0] = sub[idx, idx + 1].sum()
            dLs = (
                np.array([[L[0, 0], 0.0], [0.0, 0.0]]),
                np.array([[0.0, 0.0], [0.0, L[1, 1]]]),
                np.array([[0.0, 0.0], [1.0, 0.0]]),
            )
            for i, dL in enumerate(dLs):
                dG = dL @ L.T + L @ dL.T
                D = -Ginv @ dG @ Ginv
                grad[k + i] = (
                    scale * float(np.sum(D * Uhat))
                    + float(np.sum(D * Bsum))
                    - nu * float(np.sum(Gt * D))
                )
            k += 3
        return val, grad

    def _fd_grad(self, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
        """Central-difference gradient; test oracle for objective_and_grad."""
        g = np.empty_like(theta)
        for j in range(theta.size):
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            g[j] = (self.objective(tp) - self.objective(tm)) / (2.0 * h)
        return g

    def optimize(self, theta0: np.ndarray) -> np.ndarray:
        if self.settings.theta_override is not None:
            theta = np.asarray(self.settings.theta_override, dtype=float)
            if theta.size != self.layout.n_theta:
                raise SchemaError(
                    f"theta_override has {theta.size} entries, model needs "
                    f"{self.layout.n_theta}"
                )
            return theta
        if self.layout.n_theta == 0:
            return theta0
        bounds = [(-18.0, 18.0)] * sum(self.layout.n_block_lams)
        if self.layout.unit_start is not None:
            bounds += [(-12.0, 12.0), (-12.0, 12.0), (-1e3, 1e3)]
        path = self.diag.objective_path
        res = minimize(
            self.objective_and_grad,
            theta0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            callback=lambda xk: path.append(self.objective(xk)),
            options={
                "maxiter": self.settings.max_outer_iter,
                "gtol": self.settings.outer_gtol,
                "ftol": 1e-12,
            },
        )
        self.diag.outer_iterations += int(res.nit)
        grad_norm = _projected_grad_norm(res.x, res.jac, bounds)
        self.diag.grad_inf_norm = grad_norm
        if not (res.success or grad_norm < 1e-3):
            self.diag.converged = False
            self.diag.messages.append(f"outer optimizer: {res.message}")
        return np.asarray(res.x, dtype=float)

    # -- state at a parameter value -------------------------------------

    def state(self, theta: np.ndarray) -> dict:
        lay = self.layout
        A, cho, dhat, Q, logdet_s = self._core(theta)
        n, p = self.n, lay.p
        dof = (n - p) if self.settings.method == "reml" else n
        sigma2 = max(Q / dof, SIGMA2_FLOOR)
        Ainv = cho_solve(cho, np.eye(lay.q))
        S = self._penalty_matrix(theta)
        edf_cols = 1.0 - np.einsum("ij,ji->i", Ainv, S)
        fitted = lay.C @ dhat
        M = lay.C @ Ainv
        hat_diag = np.einsum("ij,ij->i", M, lay.C) * self._w_obs
        return {
            "theta": theta,
            "A_inv": Ainv,
            "coef": dhat,
            "sigma2": sigma2,
            "fitted": fitted,
            "hat_diag": hat_diag,
            "edf_cols": edf_cols,
            "objective": self._value(theta, cho, Q, logdet_s),
        }

    def unit_df(self, hat_diag: np.ndarray) -> np.ndarray:
        return np.bincount(self.obs_unit, weights=hat_diag, minlength=self.bundle.n_units)


def fit_amm(
    bundle: DesignBundle,
    settings: FitSettings | None = None,
    theta_init: np.ndarray | None = None,
    v_init: np.ndarray | None = None,
) -> FittedAMM:
    """Fit the model a DesignBundle describes.

    Returns a converged fit or one flagged non-converged in its
    diagnostics; callers doing model comparison treat the flag as a worst
    score rather than an error.
    """
    settings = settings or FitSettings()
    if settings.method not in ("reml", "ml"):
        raise SchemaError(f"unknown estimation method {settings.method!r}")
    engine = _Engine(bundle, settings)
    lay = engine.layout
    nu = bundle.n_units
    n_times = np.bincount(bundle.unit_index, minlength=nu).astype(float)

    if settings.unit_variance_override is not None:
        v = np.asarray(settings.unit_variance_override, dtype=float)
        if v.shape != (nu,):
            raise SchemaError(f"unit_variance_override must have {nu} entries")
        free_v = False
    else:
        v = np.ones(nu) if v_init is None else np.asarray(v_init, dtype=float).copy()
        free_v = bundle.heteroscedastic
    theta = (
        np.asarray(theta_init, dtype=float)
        if theta_init is not None
        else np.zeros(lay.n_theta)
    )

    def variance_targets(state: dict) -> np.ndarray:
        """Per-unit residual variance relative to sigma^2: unit RSS over the
        unit's residual degrees of freedom, floored to keep weights finite."""
        df_unit = engine.unit_df(state["hat_diag"])
        resid = bundle.y - state["fitted"]
        rss_unit = np.bincount(bundle.unit_index, weights=resid**2, minlength=nu)
        s2 = rss_unit / np.maximum(n_times - df_unit, 0.1)
        return np.maximum(s2 / state["sigma2"], MIN_UNIT_VARIANCE_RATIO)

    state = None
    variances_stable = not free_v
    rounds = 0
    for rounds in range(1, max(1, settings.variance_rounds) + 1):
        engine.set_relative_variances(v)
        theta = engine.optimize(theta)
        state = engine.state(theta)
        if not free_v:
            break
        target = variance_targets(state)
        if np.max(np.abs(target / v - 1.0)) < settings.variance_tol:
            variances_stable = True
            break
        v = target
    engine.diag.variance_rounds = rounds
    if not variances_stable:
        engine.diag.converged = False
        engine.diag.messages.append("per-unit variance fixed point did not stabilize")

    lams = {
        blk.name: tuple(l) for blk, l in zip(bundle.blocks, lay.block_lambdas(theta))
    }
    Gtilde = None
    if lay.unit_start is not None:
        L = lay.gamma_chol(theta)
        Gtilde = L @ L.T

    sigma2 = state["sigma2"]
    edf_by_term: dict[str, float] = {}
    for term in bundle.terms:
        cols = term_columns(lay, term)
        edf_by_term[term.name] = float(np.sum(state["edf_cols"][cols])) if cols.size else 0.0
    edf_total = float(np.sum(state["edf_cols"]))

    cond_ll = _conditional_loglik(bundle.y, state["fitted"], sigma2 * v, bundle.unit_index)

    return FittedAMM(
        bundle=bundle,
        settings=settings,
        coefficients=state["coef"],
        theta=theta,
        lambdas=lams,
        Gtilde=Gtilde,
        sigma2=sigma2,
        relative_unit_variances=v,
        fitted=state["fitted"],
        hat_diag=state["hat_diag"],
        edf_columns=state["edf_cols"],
        edf_by_term=edf_by_term,
        edf_total=edf_total,
        cond_loglik=cond_ll,
        marginal_loglik=-0.5 * state["objective"],
        cov_unscaled=state["A_inv"],
        diagnostics=engine.diag,
        _layout=lay,
    )


def _conditional_loglik(
    y: np.ndarray, fitted: np.ndarray, unit_variances: np.ndarray, unit_index: np.ndarray
) -> float:
    var = unit_variances[unit_index]
    if np.any(var < SIGMA2_FLOOR):
        warnings.warn(
            "near-zero residual variance floored at 1e-10 in the conditional "
            "log-likelihood",
            stacklevel=3,
        )
        var = np.maximum(var, SIGMA2_FLOOR)
    resid = y - fitted
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * var) + resid**2 / var))


def conditional_loglik(fit: FittedAMM) -> float:
    """Gaussian log-density of the data given the predicted unit effects,
    with the estimated per-unit variances plugged in."""
    return _conditional_loglik(
        fit.bundle.y, fit.fitted, fit.unit_variances, fit.bundle.unit_index
    )


def effective_dof(fit: FittedAMM) -> dict[str, float]:
    """Per-term effective degrees of freedom (trace share of the
    conditional influence operator), plus the total under '_total'."""
    out = dict(fit.edf_by_term)
    out["_total"] = fit.edf_total
    return out


def _panel_to_rows(panel: PanelDataset) -> dict[str, np.ndarray]:
    data: dict[str, np.ndarray] = {
        panel.unit_name: np.array([panel.units[i] for i in panel.unit_index]),
        panel.time_name: panel.time_values.astype(float),
    }
    for name, col in panel.columns.items():
        if isinstance(col, CategoricalColumn):
            data[name] = np.array([col.levels[c] if c >= 0 else "" for c in col.codes])
        else:
            data[name] = col.values
    return data


def predict(
    fit: FittedAMM,
    newdata: PanelDataset | Mapping[str, np.ndarray],
    conditional: bool = False,
) -> np.ndarray:
    """Model predictions for new rows.

    conditional=True adds the fitted unit effects (known units only);
    conditional=False returns the population-level linear predictor with
    unit effects at their zero mean.
    """
    bundle = fit.bundle
    data = _panel_to_rows(newdata) if isinstance(newdata, PanelDataset) else dict(newdata)
    if bundle.unit_name not in data:
        raise SchemaError(f"new data lacks the unit column {bundle.unit_name!r}")
    if bundle.time_name not in data:
        raise SchemaError(f"new data lacks the time column {bundle.time_name!r}")
    n = len(np.asarray(data[bundle.unit_name]))
    lay = fit._layout
    eta = np.zeros(n)
    for term in bundle.terms:
        if term.kind == "units":
            continue
        X_t, Z_t = term_design_rows(bundle, term, data, n)
        if X_t.shape[1]:
            cols = lay.x_offset + np.asarray(term.x_cols, dtype=int)
            eta += X_t @ fit.coefficients[cols]
        if Z_t is not None:
            eta += Z_t @ fit.coefficients[lay.block_slice(term.block)]
    if conditional and bundle.effects != "none":
        effects = fit.unit_effects()
        t = np.asarray(data[bundle.time_name], dtype=float) - bundle.first_time
        units = np.asarray(data[bundle.unit_name])
        for r, u in enumerate(units):
            if u not in effects:
                raise SchemaError(f"unknown unit {u!r} for conditional prediction")
            b = effects[u]
            eta[r] += b[0] + b[1] * t[r]
    return eta


def term_significance(fit: FittedAMM, term_name: str) -> TermTest:
    """Wald-type test that all parameters of one term are zero.

    The statistic is the quadratic form of the term's coefficients in the
    (pseudo-)inverse of their estimated covariance; the reference
    chi-square uses the rounded EDF for smooth/tensor terms and the exact
    retained column count for parametric terms.
    """
    term = fit.bundle.term(term_name)
    cols = term_columns(fit._layout, term)
    if cols.size == 0:
        return TermTest(term_name, np.nan, 0, np.nan, "", note="term fully dropped")
    coef = fit.coefficients[cols]
    V = fit.sigma2 * fit.cov_unscaled[np.ix_(cols, cols)]
    vals, vecs = np.linalg.eigh(0.5 * (V + V.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    note = ""
    if term.kind in ("smooth", "tensor"):
        df = int(min(max(1, round(fit.edf_by_term[term_name])), cols.size))
    else:
        tol = max(vals[0], 0.0) * 1e-10
        rank = int(np.sum(vals > tol))
        df = cols.size
        if rank < cols.size:
            df = rank
            note = "rank-deficient covariance; df reduced to its rank"
    use = vals[:df]
    if np.any(use <= 0):
        df = int(np.sum(use > 0))
        use = use[:df]
        note = note or "covariance rank below rounded EDF; df reduced"
    if df == 0:
        return TermTest(term_name, 0.0, 0, 1.0, "", note=note or "no testable directions")
    proj = vecs[:, :df].T @ coef
    stat = float(np.sum(proj**2 / use))
    p = float(chi2.sf(stat, df))
    return TermTest(term_name, stat, df, p, significance_code(p), note=note)


def smooth_effect_curve(
    fit: FittedAMM,
    term_name: str,
    grid: np.ndarray | None = None,
    n_grid: int = 100,
) -> EffectCurve | EffectSurface:
    """Estimated effect of a smooth (curve) or tensor (surface) term with
    pointwise 95% confidence bands, evaluated inside the data support."""
    term = fit.bundle.term(term_name)
    info = term.info
    cols = term_columns(fit._layout, term)
    Vb = fit.sigma2 * fit.cov_unscaled[np.ix_(cols, cols)]
    coef = fit.coefficients[cols]
    edf = fit.edf_by_term[term_name]

    if term.kind == "smooth":
        if grid is None:
            grid = np.linspace(info["x_min"], info["x_max"], n_grid)
        grid = np.asarray(grid, dtype=float)
        if grid.min() < info["x_min"] - 1e-12 or grid.max() > info["x_max"] + 1e-12:
            raise SchemaError(
                f"grid outside the data support [{info['x_min']}, {info['x_max']}]"
            )
        B = (
            BSpline.design_matrix(
                np.clip(grid, info["x_min"], info["x_max"]), info["knots"], info["degree"]
            ).toarray()
            @ info["Q"]
        )
        G = np.hstack([(B @ info["U0"])[:, term.local_kept], B @ info["U1s"]])
        effect = G @ coef
        se = np.sqrt(np.maximum(np.einsum("ij,ij->i", G @ Vb, G), 0.0))
        return EffectCurve(
            term=term_name,
            grid=grid,
            effect=effect,
            lower=effect - 1.96 * se,
            upper=effect + 1.96 * se,
            rug=info["x_obs"],
            edf=edf,
        )

    if term.kind == "tensor":
        gx = np.linspace(*info["x_range"], n_grid if grid is None else len(grid))
        gz = np.linspace(*info["z_range"], n_grid if grid is None else len(grid))
        GX, GZ = np.meshgrid(gx, gz, indexing="ij")
        Bx = BSpline.design_matrix(GX.ravel(), info["knots_x"], info["degree"]).toarray()
        Bz = BSpline.design_matrix(GZ.ravel(), info["knots_z"], info["degree"]).toarray()
        T = (Bx[:, :, None] * Bz[:, None, :]).reshape(GX.size, -1) @ info["Q"]
        G = np.hstack([(T @ info["U0"])[:, term.local_kept], T @ info["U1"]])
        effect = G @ coef
        se = np.sqrt(np.maximum(np.einsum("ij,ij->i", G @ Vb, G), 0.0))
        return EffectSurface(
            term=term_name,
            grid_x=GX.ravel(),
            grid_z=GZ.ravel(),
            effect=effect,
            lower=effect - 1.96 * se,
            upper=effect + 1.96 * se,
            edf=edf,
        )

    raise SchemaError(f"term {term_name!r} is not a smooth or tensor term")
