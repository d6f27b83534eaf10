"""Time grid and the penalty/covariance matrices behind every prior in the model.

Every functional prior in the registration model is built from two matrices on
the evaluation grid: ``P1``, a covariance on the span of constant and linear
functions, and ``P2``, a covariance on the orthogonal complement (directions of
curvature).  Their generalized inverses act as penalty operators, and the sum
``Sigma = P1 + P2`` is a proper (positive definite) covariance.

Construction: let ``D`` be the second-divided-difference operator for the
(possibly non-uniform) grid and ``W`` a diagonal matrix of quadrature weights.
Then ``P2ginv = D' W D`` penalizes curvature and annihilates constants and
linear trends; ``P2`` is its Moore-Penrose pseudoinverse.  ``P1 = P1ginv = QQ'``
where ``Q`` is an orthonormal basis of span{1, t}.  This gives complementary
ranges (``P1 @ P2ginv = 0``), ``Sigma`` positive definite, and the closed form
``SigmaInv = P1ginv + P2ginv``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonMonotoneGrid, NumericalRankFailure, TooFewPoints

PINV_RTOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing evaluation times shared by all curves."""

    points: np.ndarray

    @property
    def p(self) -> int:
        return self.points.shape[0]

    @property
    def spacings(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def t1(self) -> float:
        return float(self.points[0])

    @property
    def tp(self) -> float:
        return float(self.points[-1])

    @property
    def span(self) -> float:
        return self.tp - self.t1


def build_time_grid(points) -> TimeGrid:
    """Validate a vector of times and wrap it as a TimeGrid.

    Raises TooFewPoints for fewer than 3 points and NonMonotoneGrid for
    duplicate or decreasing times.
    """
    pts = np.asarray(points, dtype=float).ravel()
    if pts.shape[0] < 3:
        raise TooFewPoints(f"grid needs at least 3 points, got {pts.shape[0]}")
    if not np.all(np.isfinite(pts)):
        raise NonMonotoneGrid("grid contains non-finite times")
    if np.any(np.diff(pts) <= 0):
        k = int(np.argmax(np.diff(pts) <= 0))
        raise NonMonotoneGrid(
            f"grid times must be strictly increasing (violation at index {k + 1})"
        )
    pts = pts.copy()
    pts.flags.writeable = False
    return TimeGrid(points=pts)


def _linear_span_projector(t: np.ndarray) -> np.ndarray:
    # orthonormal basis of span{1, t}; for 2 points this is all of R^2
    basis = np.column_stack([np.ones_like(t), t])
    q, _ = np.linalg.qr(basis)
    return q @ q.T


def second_difference_operator(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Second-divided-difference rows and their quadrature weights.

    Row j approximates the second derivative at the interior point t[j+1];
    the weights are trapezoid-style spans (t[j+2]-t[j])/2.  Exact annihilation
    of constants and linear trends holds for arbitrary strictly increasing t.
    """
    p = t.shape[0]
    m = p - 2
    d = np.zeros((m, p))
    weights = np.zeros(m)
    for j in range(m):
        h1 = t[j + 1] - t[j]
        h2 = t[j + 2] - t[j + 1]
        d[j, j] = 2.0 / (h1 * (h1 + h2))
        d[j, j + 1] = -2.0 / (h1 * h2)
        d[j, j + 2] = 2.0 / (h2 * (h1 + h2))
        weights[j] = 0.5 * (t[j + 2] - t[j])
    return d, weights


def first_difference_operator(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First-divided-difference rows with cell-length quadrature weights."""
    p = t.shape[0]
    m = p - 1
    d = np.zeros((m, p))
    weights = np.zeros(m)
    for j in range(m):
        h = t[j + 1] - t[j]
        d[j, j] = -1.0 / h
        d[j, j + 1] = 1.0 / h
        weights[j] = h
    return d, weights


@dataclass(frozen=True)
class GridPenalties:
    """P1/P2 covariance pair and their penalty operators on a single grid."""

    t: np.ndarray
    P1: np.ndarray
    P2: np.ndarray
    Sigma: np.ndarray
    P1ginv: np.ndarray
    P2ginv: np.ndarray
    SigmaInv: np.ndarray

    @property
    def p(self) -> int:
        return self.t.shape[0]

    def combo_inverse(self, alpha: float, beta: float) -> np.ndarray:
        """Inverse of alpha*P1 + beta*P2 using the complementary-range algebra."""
        return self.P1ginv / alpha + self.P2ginv / beta


def _build_grid_penalties(t: np.ndarray) -> GridPenalties:
    p = t.shape[0]
    proj = _linear_span_projector(t)
    if p <= 2:
        # no curvature directions exist; Sigma degenerates to the P1 block
        zero = np.zeros((p, p))
        return GridPenalties(
            t=t, P1=proj, P2=zero, Sigma=proj.copy(),
            P1ginv=proj, P2ginv=zero, SigmaInv=proj.copy(),
        )
    d, w = second_difference_operator(t)
    p2ginv = d.T @ (w[:, None] * d)
    p2ginv = 0.5 * (p2ginv + p2ginv.T)
    p2 = np.linalg.pinv(p2ginv, rcond=PINV_RTOL, hermitian=True)
    p2 = 0.5 * (p2 + p2.T)
    sigma = proj + p2
    sigma_inv = proj + p2ginv

    rank = np.linalg.matrix_rank(p2ginv, tol=None, hermitian=True)
    if rank != p - 2:
        raise NumericalRankFailure(
            f"curvature operator has rank {rank}, expected {p - 2}"
        )
    return GridPenalties(
        t=t, P1=proj, P2=p2, Sigma=sigma,
        P1ginv=proj, P2ginv=p2ginv, SigmaInv=sigma_inv,
    )


@dataclass(frozen=True)
class PenaltySet:
    """All penalty matrices for one model: the full grid and the base-function grid.

    ``main`` carries the p-dimensional matrices used by the registered-function
    and target priors.  ``base`` carries the (p-1)-dimensional analogues on the
    subgrid t1..t_{p-1} where base functions live, and ``Pw`` is the smoothing
    covariance for base functions (second- or first-derivative flavour).
    """

    grid: TimeGrid
    main: GridPenalties
    base: GridPenalties
    Pw: np.ndarray
    derivative_order_w: int = 2

    # convenience views of the full-grid matrices
    @property
    def P1(self) -> np.ndarray:
        return self.main.P1

    @property
    def P2(self) -> np.ndarray:
        return self.main.P2

    @property
    def Sigma(self) -> np.ndarray:
        return self.main.Sigma

    @property
    def P1ginv(self) -> np.ndarray:
        return self.main.P1ginv

    @property
    def P2ginv(self) -> np.ndarray:
        return self.main.P2ginv

    @property
    def SigmaInv(self) -> np.ndarray:
        return self.main.SigmaInv

    @property
    def Sigma_w(self) -> np.ndarray:
        """Sigma on the base-function subgrid."""
        return self.base.Sigma

    @property
    def p(self) -> int:
        return self.grid.p


def build_penalty_set(grid: TimeGrid, derivative_order_w: int = 2) -> PenaltySet:
    """Assemble every penalty matrix the model needs from a validated grid."""
    if derivative_order_w not in (1, 2):
        raise ValueError("derivative_order_w must be 1 or 2")
    t = grid.points
    main = _build_grid_penalties(t)
    t_sub = t[:-1]
    base = _build_grid_penalties(t_sub)
    if derivative_order_w == 2:
        pw = base.P2
    else:
        d1, w1 = first_difference_operator(t_sub)
        k1 = d1.T @ (w1[:, None] * d1)
        k1 = 0.5 * (k1 + k1.T)
        pw = np.linalg.pinv(k1, rcond=PINV_RTOL, hermitian=True)
        pw = 0.5 * (pw + pw.T)
    return PenaltySet(
        grid=grid, main=main, base=base, Pw=pw,
        derivative_order_w=derivative_order_w,
    )
