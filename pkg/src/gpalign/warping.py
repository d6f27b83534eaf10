"""Monotone warping functions and evaluation of curves at warped times.

A warp is stored as its values ``h(t_1)..h(t_p)`` on the grid.  It is built
from an unconstrained base function ``w`` (values on t_1..t_{p-1}) through

    h(t_j) = t_1 + sum_{k=2..j} (t_k - t_{k-1}) * exp(w(t_{k-1})),

which is strictly increasing by construction and fixes h(t_1) = t_1.  The
right-endpoint constraint h(t_p) = t_p is enforced by a uniform log-shift
projection of ``w``.  All interpolation is piecewise linear, so warps have
closed-form inverses.

Most functions accept either a TimeGrid or a bare array of node times; the
prediction pipeline uses truncated node sets whose warp ends at a value other
than the last node (``end_value``).
"""

from __future__ import annotations

import numpy as np

from .errors import EndpointViolation, QueryOutOfDomain
from .penalties import TimeGrid

ENDPOINT_ATOL = 1e-9
_DOMAIN_RTOL = 1e-9


def _times(grid) -> np.ndarray:
    if isinstance(grid, TimeGrid):
        return grid.points
    return np.asarray(grid, dtype=float)


def warp_from_base(w, grid, end_value: float | None = None) -> np.ndarray:
    """Map a projected base function to its warp values on the grid nodes.

    ``end_value`` is the required value of the warp at the last node
    (defaults to the last node itself).  Raises EndpointViolation when the
    base function has not been projected onto the constraint.
    """
    t = _times(grid)
    w = np.asarray(w, dtype=float)
    if w.shape[0] != t.shape[0] - 1:
        raise ValueError(f"base function has {w.shape[0]} values, expected {t.shape[0] - 1}")
    target = t[-1] if end_value is None else float(end_value)
    h = np.empty_like(t)
    h[0] = t[0]
    h[1:] = t[0] + np.cumsum(np.diff(t) * np.exp(w))
    scale = max(abs(target - t[0]), 1.0)
    if abs(h[-1] - target) > ENDPOINT_ATOL * scale:
        raise EndpointViolation(
            f"warp endpoint {h[-1]!r} differs from required {target!r}"
        )
    h[-1] = target
    return h


def project_endpoint(w, grid, end_value: float | None = None) -> np.ndarray:
    """Uniform log-shift of a base function so its warp hits the endpoint exactly.

    Returns w - log s with s = (h_w(t_p) - t_1) / (end - t_1); the projection is
    idempotent and preserves the warp's shape up to a uniform time rescaling.
    """
    t = _times(grid)
    w = np.asarray(w, dtype=float)
    target = t[-1] if end_value is None else float(end_value)
    total = float(np.sum(np.diff(t) * np.exp(w)))
    s = total / (target - t[0])
    return w - np.log(s)


def _check_domain(queries: np.ndarray, lo: float, hi: float) -> np.ndarray:
    tol = _DOMAIN_RTOL * max(hi - lo, 1.0)
    if np.any(queries < lo - tol) or np.any(queries > hi + tol):
        bad = queries[(queries < lo - tol) | (queries > hi + tol)]
        raise QueryOutOfDomain(f"query {bad.ravel()[0]!r} outside [{lo!r}, {hi!r}]")
    return np.clip(queries, lo, hi)


def eval_linear(values, grid, query):
    """Piecewise-linear evaluation of grid values at query times.

    Exact at the knots; raises QueryOutOfDomain outside [t_1, t_p].
    Accepts a scalar or an array of queries.
    """
    t = _times(grid)
    values = np.asarray(values, dtype=float)
    q = np.asarray(query, dtype=float)
    scalar = q.ndim == 0
    q = _check_domain(np.atleast_1d(q), t[0], t[-1])
    out = np.interp(q, t, values)
    return float(out[0]) if scalar else out


def invert_warp(h, grid, queries):
    """Exact piecewise-linear inverse of a monotone warp.

    ``queries`` are times in the warp's range; returns the times s with
    h(s) = query.  Exact at the knot images h(t_j).
    """
    t = _times(grid)
    h = np.asarray(h, dtype=float)
    q = np.asarray(queries, dtype=float)
    scalar = q.ndim == 0
    q = _check_domain(np.atleast_1d(q), h[0], h[-1])
    out = np.interp(q, h, t)
    return float(out[0]) if scalar else out


def apply_warp(x, grid, h) -> np.ndarray:
    """Evaluate curve values x (on the grid) at the warped times h."""
    t = _times(grid)
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    q = _check_domain(h, t[0], t[-1])
    return np.interp(q, t, x)


def interp_with_slope(x, grid, queries) -> tuple[np.ndarray, np.ndarray]:
    """Linear interpolation plus the slope of the active cell at each query.

    The slope is the piecewise-constant derivative of the interpolant; queries
    at a knot take the slope of the cell to their right (left at t_p).  Used by
    the base-function optimizer, which treats cell membership as locally fixed.
    """
    t = _times(grid)
    x = np.asarray(x, dtype=float)
    q = _check_domain(np.atleast_1d(np.asarray(queries, dtype=float)), t[0], t[-1])
    cells = np.clip(np.searchsorted(t, q, side="right") - 1, 0, t.shape[0] - 2)
    slopes_all = np.diff(x) / np.diff(t)
    slopes = slopes_all[cells]
    values = x[cells] + slopes * (q - t[cells])
    return values, slopes
