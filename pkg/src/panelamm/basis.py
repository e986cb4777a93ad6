"""Penalized spline building blocks.

Univariate cubic B-spline bases on equidistant knots with difference
penalties, the sum-to-zero identifiability transform, the mixed-model
(null-space / ridge) reparameterization, and bivariate tensor-product
designs with one penalty per margin.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import BSpline

from .errors import DimensionError, DomainError, NumericError

# Eigenvalues below this fraction of the largest penalty eigenvalue are
# treated as zero when splitting off the penalty null space.
NULLSPACE_RTOL = 1e-10


def difference_penalty(k: int, order: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Return (P, D) where D is the order-th difference operator on k
    coefficients and P = D'D.

    P has rank k - order; its null space holds coefficient sequences that
    are polynomials of degree < order.
    """
    if order < 1:
        raise DimensionError(f"difference order must be >= 1, got {order}")
    if k <= order:
        raise DimensionError(f"need k > order, got k={k}, order={order}")
    D = np.eye(k)
    for _ in range(order):
        D = np.diff(D, axis=0)
    return D.T @ D, D


def equidistant_knots(lo: float, hi: float, k: int, degree: int) -> np.ndarray:
    """Knot vector of length k + degree + 1 spanning [lo, hi] with degree
    extra knots beyond each end, all equally spaced.

    The boundary knots hit lo and hi exactly so the data extremes stay
    inside the base interval.
    """
    if not hi > lo:
        raise DomainError(f"degenerate support [{lo}, {hi}] for spline basis")
    inner = np.linspace(lo, hi, k - degree + 1)
    h = (hi - lo) / (k - degree)
    left = lo - h * np.arange(degree, 0, -1)
    right = hi + h * np.arange(1, degree + 1)
    return np.concatenate([left, inner, right])


@dataclass(frozen=True)
class BasisBlock:
    """A spline design with its difference penalty.

    ``design`` is n_obs x n_coef.  When ``constraint`` is set the block has
    been transformed so every representable effect sums to zero over the
    rows it was built from; ``constraint`` then maps constrained
    coefficients back to the original k B-spline coefficients.
    """

    design: np.ndarray
    knots: np.ndarray
    degree: int
    penalty: np.ndarray
    penalty_order: int
    x_min: float
    x_max: float
    constraint: np.ndarray | None = None

    @property
    def n_coef(self) -> int:
        return self.design.shape[1]

    @property
    def constrained(self) -> bool:
        return self.constraint is not None

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Design rows for new points, using the stored knots (and the
        constraint transform if one was applied).  Points outside the
        training support are a hard error."""
        x = np.asarray(x, dtype=float)
        if x.size and (x.min() < self.x_min - 1e-12 or x.max() > self.x_max + 1e-12):
            raise DomainError(
                f"evaluation points outside training support "
                f"[{self.x_min}, {self.x_max}]"
            )
        B = _bspline_design(np.clip(x, self.x_min, self.x_max), self.knots, self.degree)
        if self.constraint is not None:
            B = B @ self.constraint
        return B


def _bspline_design(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    return BSpline.design_matrix(x, knots, degree, extrapolate=False).toarray()


def bspline_basis(
    x: np.ndarray, k: int = 10, degree: int = 3, penalty_order: int = 2
) -> BasisBlock:
    """Evaluate k B-spline basis functions of the given degree on
    equidistant knots over the observed range of x, with an order-d
    difference penalty on the coefficients.

    Rows sum to one (partition of unity) everywhere inside the range.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise DomainError("spline inputs must be finite and non-empty")
    if k < degree + 1:
        raise DimensionError(f"basis dimension k={k} too small for degree {degree}")
    if k <= penalty_order:
        raise DimensionError(f"basis dimension k={k} too small for penalty order {penalty_order}")
    lo, hi = float(x.min()), float(x.max())
    knots = equidistant_knots(lo, hi, k, degree)
    design = _bspline_design(x, knots, degree)
    P, _ = difference_penalty(k, penalty_order)
    return BasisBlock(
        design=design,
        knots=knots,
        degree=degree,
        penalty=P,
        penalty_order=penalty_order,
        x_min=lo,
        x_max=hi,
    )


def sum_to_zero_transform(column_sums: np.ndarray) -> np.ndarray:
    """Orthonormal k x (k-1) basis of {a : column_sums . a = 0}.

    Applying it to a design's columns removes the direction whose fitted
    effects have a nonzero sample sum.
    """
    c = np.asarray(column_sums, dtype=float).reshape(-1, 1)
    if np.linalg.norm(c) == 0.0:
        raise NumericError("zero column-sum vector; constraint is vacuous")
    Q, _ = np.linalg.qr(c, mode="complete")
    return Q[:, 1:]


def apply_sum_to_zero(block: BasisBlock) -> BasisBlock:
    """Constrain the block so any coefficient vector gives effects summing
    to zero over the rows the block was built from.  Returns a new block
    with k-1 columns and a congruently transformed penalty."""
    if block.constrained:
        raise DimensionError("block is already constrained")
    Q = sum_to_zero_transform(block.design.sum(axis=0))
    return replace(
        block,
        design=block.design @ Q,
        penalty=Q.T @ block.penalty @ Q,
        constraint=Q,
    )


@dataclass(frozen=True)
class MixedReparam:
    """Split of a penalized block into an unpenalized null-space design and
    a ridge-penalized design.

    ``x_unpen`` spans the penalty null space; ``z_pen`` is scaled so the
    penalty becomes the identity, i.e. a penalized fit on the original
    block with parameter lam equals the ridge fit on z_pen with the same
    lam.  ``null_map``/``range_map`` send the new coefficients back to the
    block's coefficient space.
    """

    x_unpen: np.ndarray
    z_pen: np.ndarray
    null_map: np.ndarray
    range_map: np.ndarray

    @property
    def null_dim(self) -> int:
        return self.x_unpen.shape[1]


def split_penalty_null_space(penalty: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigen-split a PSD penalty into (U0, U1, positive eigenvalues).

    U0 spans the numerical null space (eigenvalues below NULLSPACE_RTOL of
    the largest); U1 the penalized complement.
    """
    penalty = np.asarray(penalty, dtype=float)
    vals, vecs = np.linalg.eigh(0.5 * (penalty + penalty.T))
    top = vals[-1]
    if top <= 0:
        raise NumericError("penalty has no positive eigenvalues")
    if vals[0] < -1e-8 * top:
        raise NumericError(f"penalty is numerically indefinite (min eig {vals[0]:.3e})")
    null = vals <= NULLSPACE_RTOL * top
    return vecs[:, null], vecs[:, ~null], vals[~null]


def reparameterize_to_mixed(block: BasisBlock) -> MixedReparam:
    """Mixed-model form of a penalized block: unpenalized columns spanning
    the penalty null space plus identity-penalized columns."""
    U0, U1, pos = split_penalty_null_space(block.penalty)
    scale = U1 / np.sqrt(pos)
    return MixedReparam(
        x_unpen=block.design @ U0,
        z_pen=block.design @ scale,
        null_map=U0,
        range_map=scale,
    )


@dataclass(frozen=True)
class TensorBlock:
    """Row-wise Kronecker product of two marginal spline blocks.

    Column (i, j) of the design is marginal_x column i times marginal_z
    column j, flattened x-major: flat index = i * k_z + j.  One penalty per
    margin: (P_x kron I, I kron P_z).
    """

    design: np.ndarray
    marginal_x: BasisBlock
    marginal_z: BasisBlock
    penalties: tuple[np.ndarray, np.ndarray]

    @property
    def n_coef(self) -> int:
        return self.design.shape[1]

    def evaluate(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        Bx = self.marginal_x.evaluate(x)
        Bz = self.marginal_z.evaluate(z)
        return _row_kron(Bx, Bz)


def _row_kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    return (A[:, :, None] * B[:, None, :]).reshape(n, A.shape[1] * B.shape[1])


def tensor_product(block_x: BasisBlock, block_z: BasisBlock) -> TensorBlock:
    """Bivariate tensor-product design from two marginal blocks built on
    the same observation rows."""
    if block_x.design.shape[0] != block_z.design.shape[0]:
        raise DimensionError(
            f"marginal blocks built on different row counts "
            f"({block_x.design.shape[0]} vs {block_z.design.shape[0]})"
        )
    if block_x.constrained or block_z.constrained:
        raise DimensionError("tensor products take unconstrained marginal blocks")
    kx, kz = block_x.n_coef, block_z.n_coef
    design = _row_kron(block_x.design, block_z.design)
    P1 = np.kron(block_x.penalty, np.eye(kz))
    P2 = np.kron(np.eye(kx), block_z.penalty)
    return TensorBlock(
        design=design,
        marginal_x=block_x,
        marginal_z=block_z,
        penalties=(P1, P2),
    )
