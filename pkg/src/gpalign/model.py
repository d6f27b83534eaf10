"""Model configuration, latent state, and the log-density kernels shared by
the variational and MCMC fitters.

The hierarchical model: each registered curve X_i(h_i) is Gaussian around
z0_i * 1 + z1_i * f with precision gamma_R * SigmaInv; base functions carry a
constrained Gaussian prior with covariance gamma_w^{-1} Sigma_w + lambda_w^{-1} Pw;
the target f has precision eta_f * P1ginv + lambda_f * P2ginv; shifts z0 sum to
zero across curves, scales z1 are centered at 1, and the variance components
carry inverse-gamma / gamma priors.

In the noisy-observation extension the data Y_i are Gaussian around latent
smooth curves X_i, the registration weight becomes
(gamma_R^{-1} Sigma + Sigma_X)^{-1}, and a separate roughness factor ties the
unregistered X_i to the target composed with the inverse warp (this is the
factorization that keeps every precision parameter conjugate).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DimensionMismatch, SingularPriorCovariance
from .penalties import PenaltySet
from .warping import interp_with_slope, project_endpoint, warp_from_base


@dataclass(frozen=True)
class Hyperparams:
    """Fixed shape/rate hyperparameters for the variance and precision priors."""

    a: float = 0.001
    b: float = 0.001
    c: float = 0.001
    d: float = 0.001

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) <= 0:
            raise ValueError("hyperparameters must be strictly positive")


@dataclass
class ModelConfig:
    """Penalty settings and hyperparameters for one registration problem.

    gamma_R penalizes lack of registration, gamma_w (scalar or one value per
    curve) penalizes departure from the identity warp, lambda_w smooths the
    base functions.  These are user-chosen, typically explored in powers of
    ten; they stay fixed during a fit.
    """

    gamma_R: float = 1.0
    gamma_w: float | np.ndarray = 1.0
    lambda_w: float = 1.0
    hyper: Hyperparams = field(default_factory=Hyperparams)
    noisy: bool = False

    def validate(self, n_curves: int | None = None) -> None:
        if self.gamma_R <= 0 or self.lambda_w <= 0:
            raise ValueError("penalties must be strictly positive")
        gw = np.atleast_1d(np.asarray(self.gamma_w, dtype=float))
        if np.any(gw <= 0):
            raise ValueError("gamma_w must be strictly positive")
        if gw.shape[0] > 1 and n_curves is not None and gw.shape[0] != n_curves:
            raise ValueError(
                f"per-curve gamma_w has length {gw.shape[0]}, expected {n_curves}"
            )

    def gamma_w_for(self, i: int) -> float:
        gw = np.atleast_1d(np.asarray(self.gamma_w, dtype=float))
        return float(gw[0]) if gw.shape[0] == 1 else float(gw[i])

    def gamma_w_scalar(self) -> float:
        """Representative warping penalty for a new (N+1-th) curve."""
        gw = np.atleast_1d(np.asarray(self.gamma_w, dtype=float))
        return float(np.exp(np.mean(np.log(gw))))


class WPrior:
    """Base-function prior precisions, factorized once per unique gamma_w.

    The prior covariance gamma_wi^{-1} Sigma_w + lambda_w^{-1} Pw is positive
    definite, so its inverse is formed by Cholesky solves and cached.
    """

    def __init__(self, config: ModelConfig, penalties: PenaltySet, n_curves: int):
        self.config = config
        self.n_curves = n_curves
        self._cache: dict[float, np.ndarray] = {}
        self._penalties = penalties

    def precision(self, i: int) -> np.ndarray:
        gw = self.config.gamma_w_for(i)
        if gw not in self._cache:
            cov = self._penalties.Sigma_w / gw + self._penalties.Pw / self.config.lambda_w
            try:
                c, low = cho_factor(cov)
            except np.linalg.LinAlgError as exc:
                raise SingularPriorCovariance(str(exc)) from exc
            prec = cho_solve((c, low), np.eye(cov.shape[0]))
            self._cache[gw] = 0.5 * (prec + prec.T)
        return self._cache[gw]

    def log_kernel(self, w: np.ndarray, i: int) -> float:
        k = self.precision(i)
        return -0.5 * float(w @ k @ w)


@dataclass
class LatentState:
    """Current values of every latent block, as one mutable record.

    Invariants: z0 sums to zero (the last entry is derived), every w row
    satisfies the warp endpoint constraint, variances and precisions are
    positive.  The noisy-model fields are None when noisy=False.
    """

    w: np.ndarray                 # (N, p-1)
    z0: np.ndarray                # (N,), sum zero
    z1: np.ndarray                # (N,)
    f: np.ndarray                 # (p,)
    sigma_z0_sq: float
    sigma_z1_sq: float
    eta_f: float
    lambda_f: float
    X: np.ndarray | None = None   # (N, p) latent smooth curves
    sigma_Y_sq: float | None = None
    eta_X: float | None = None
    lambda_X: float | None = None

    @property
    def n_curves(self) -> int:
        return self.w.shape[0]

    def enforce_sum_zero(self) -> None:
        self.z0[-1] = -float(np.sum(self.z0[:-1]))

    def copy(self) -> "LatentState":
        return LatentState(
            w=self.w.copy(), z0=self.z0.copy(), z1=self.z1.copy(), f=self.f.copy(),
            sigma_z0_sq=self.sigma_z0_sq, sigma_z1_sq=self.sigma_z1_sq,
            eta_f=self.eta_f, lambda_f=self.lambda_f,
            X=None if self.X is None else self.X.copy(),
            sigma_Y_sq=self.sigma_Y_sq, eta_X=self.eta_X, lambda_X=self.lambda_X,
        )


def registration_weight(config: ModelConfig, penalties: PenaltySet,
                        eta_X: float | None = None,
                        lambda_X: float | None = None) -> np.ndarray:
    """Precision matrix of the registered-curve residual.

    Noiseless model: gamma_R * SigmaInv.  Noisy model: the inverse of
    gamma_R^{-1} Sigma + Sigma_X, available in closed form because P1 and P2
    have complementary ranges.
    """
    if eta_X is None and lambda_X is None:
        return config.gamma_R * penalties.SigmaInv
    return penalties.main.combo_inverse(
        1.0 / config.gamma_R + 1.0 / eta_X,
        1.0 / config.gamma_R + 1.0 / lambda_X,
    )


def log_registration_kernel(xh, z0: float, z1: float, f, config: ModelConfig,
                            penalties: PenaltySet,
                            weight: np.ndarray | None = None) -> float:
    """Quadratic log-density kernel of one registered curve around z0 + z1 f."""
    xh = np.asarray(xh, dtype=float)
    f = np.asarray(f, dtype=float)
    if xh.shape != f.shape or xh.shape[0] != penalties.p:
        raise DimensionMismatch(
            f"curve length {xh.shape}, target {f.shape}, grid {penalties.p}"
        )
    a = registration_weight(config, penalties) if weight is None else weight
    r = xh - z0 - z1 * f
    return -0.5 * float(r @ a @ r)


def log_base_prior(w, config: ModelConfig, penalties: PenaltySet,
                   curve_index: int = 0,
                   wprior: WPrior | None = None) -> float:
    """Log-kernel of the constrained Gaussian prior on one base function."""
    w = np.asarray(w, dtype=float)
    if w.shape[0] != penalties.p - 1:
        raise DimensionMismatch(f"base length {w.shape[0]}, expected {penalties.p - 1}")
    if wprior is None:
        wprior = WPrior(config, penalties, curve_index + 1)
    return wprior.log_kernel(w, curve_index)


def _log_ig(x: float, a: float, b: float) -> float:
    return -(a + 1.0) * np.log(x) - b / x + a * np.log(b) - _lgamma(a)


def _log_gamma_pdf(x: float, c: float, d: float) -> float:
    return (c - 1.0) * np.log(x) - d * x + c * np.log(d) - _lgamma(c)


def _lgamma(x: float) -> float:
    from scipy.special import gammaln
    return float(gammaln(x))


def registered_values(data: np.ndarray, state: LatentState,
                      penalties: PenaltySet) -> np.ndarray:
    """X_i evaluated at its warped times, for every curve."""
    t = penalties.grid.points
    n = state.n_curves
    source = data if state.X is None else state.X
    out = np.empty((n, penalties.p))
    for i in range(n):
        h = warp_from_base(state.w[i], penalties.grid)
        out[i] = np.interp(h, t, source[i])
    return out


def log_joint(data: np.ndarray, state: LatentState, config: ModelConfig,
              penalties: PenaltySet, wprior: WPrior | None = None) -> float:
    """Log of the joint density of data and all latent blocks, up to a constant.

    This is the AVB maximization objective and the Metropolis target.  For the
    noisy model it uses the factored form of the registered-curve prior: a
    registration kernel on X_i(h_i) with weight gamma_R * SigmaInv plus a
    roughness kernel on X_i around z0 + z1 f(h^{-1}), which is the version all
    conjugate updates are derived from.
    """
    data = np.asarray(data, dtype=float)
    n = state.n_curves
    p = penalties.p
    if data.shape != (n, p):
        raise DimensionMismatch(f"data shape {data.shape}, expected {(n, p)}")
    hy = config.hyper
    if wprior is None:
        wprior = WPrior(config, penalties, n)
    t = penalties.grid.points

    total = 0.0
    reg_weight = config.gamma_R * penalties.SigmaInv
    curves = data if state.X is None else state.X
    for i in range(n):
        h = warp_from_base(state.w[i], penalties.grid)
        xh = np.interp(h, t, curves[i])
        r = xh - state.z0[i] - state.z1[i] * state.f
        total += -0.5 * float(r @ reg_weight @ r)
        total += wprior.log_kernel(state.w[i], i)

    if config.noisy:
        sy2 = state.sigma_Y_sq
        sx_inv = state.eta_X * penalties.P1ginv + state.lambda_X * penalties.P2ginv
        for i in range(n):
            resid = data[i] - state.X[i]
            total += -0.5 * float(resid @ resid) / sy2 - 0.5 * p * np.log(sy2)
            h = warp_from_base(state.w[i], penalties.grid)
            hinv_t = np.interp(t, h, t)
            f_hinv = np.interp(hinv_t, t, state.f)
            ru = state.X[i] - state.z0[i] - state.z1[i] * f_hinv
            total += -0.5 * float(ru @ sx_inv @ ru)
            total += 0.5 * (2.0 * np.log(state.eta_X) + (p - 2) * np.log(state.lambda_X))
        total += _log_ig(sy2, hy.a, hy.b)
        total += _log_gamma_pdf(state.eta_X, hy.c, hy.d)
        total += _log_gamma_pdf(state.lambda_X, hy.c, hy.d)

    # shift/scale priors; z0_N carries no density of its own
    total += -0.5 * float(np.sum(state.z0[:-1] ** 2)) / state.sigma_z0_sq \
        - 0.5 * (n - 1) * np.log(state.sigma_z0_sq)
    total += -0.5 * float(np.sum((state.z1 - 1.0) ** 2)) / state.sigma_z1_sq \
        - 0.5 * n * np.log(state.sigma_z1_sq)

    # target prior with closed-form log-determinant of its precision
    f_prec = state.eta_f * penalties.P1ginv + state.lambda_f * penalties.P2ginv
    total += -0.5 * float(state.f @ f_prec @ state.f)
    total += 0.5 * (2.0 * np.log(state.eta_f) + (p - 2) * np.log(state.lambda_f))

    total += _log_ig(state.sigma_z0_sq, hy.a, hy.b)
    total += _log_ig(state.sigma_z1_sq, hy.a, hy.b)
    total += _log_gamma_pdf(state.eta_f, hy.c, hy.d)
    total += _log_gamma_pdf(state.lambda_f, hy.c, hy.d)
    return float(total)


def _node_times(grid) -> np.ndarray:
    return grid.points if hasattr(grid, "points") else np.asarray(grid, dtype=float)


def base_objective(w: np.ndarray, x: np.ndarray, target: np.ndarray,
                   weight: np.ndarray, k_prior: np.ndarray, grid,
                   x_times: np.ndarray | None = None,
                   end_value: float | None = None) -> float:
    """Registration kernel plus base prior for one curve at base function w.

    ``x_times``/``end_value`` cover the truncated-domain case where the curve
    is observed on a different grid than the warp nodes and the warp ends at a
    prescribed value.
    """
    t = _node_times(grid)
    xt = t if x_times is None else x_times
    h = warp_from_base(w, t, end_value=end_value)
    xh = np.interp(np.clip(h, xt[0], xt[-1]), xt, x)
    r = xh - target
    return -0.5 * float(r @ weight @ r) - 0.5 * float(w @ k_prior @ w)


def base_gradient(w: np.ndarray, x: np.ndarray, target: np.ndarray,
                  weight: np.ndarray, k_prior: np.ndarray, grid,
                  x_times: np.ndarray | None = None,
                  end_value: float | None = None) -> np.ndarray:
    """Analytic gradient of base_objective in w.

    Treats interpolation cell membership as locally constant: d xh_j / d w_m =
    slope(h_j) * (t_{m+1}-t_m) * exp(w_m) for j >= m+1, so the data term is a
    reversed cumulative sum of the weighted residual times the local slopes.
    """
    t = _node_times(grid)
    xt = t if x_times is None else x_times
    h = warp_from_base(w, t, end_value=end_value)
    xh, slopes = interp_with_slope(x, xt, h)
    r = xh - target
    ar = weight @ r
    g = ar * slopes
    # sum over j >= m+1 of g_j, for each cell m
    tail = np.cumsum(g[::-1])[::-1]
    grad_data = -np.diff(t) * np.exp(w) * tail[1:]
    return grad_data - k_prior @ w


def chart_direction(g: np.ndarray, w: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Gradient of the objective in the coordinates of the constraint manifold.

    The endpoint projection parameterizes feasible base functions by their
    mean-zero component; the chain rule through the log-shift turns a raw
    gradient g into g - sum(g) * dt * exp(w) / span, projected onto the
    mean-zero subspace.  Stepping along this direction and re-projecting is
    ascent on the manifold itself.
    """
    span = nodes[-1] - nodes[0]
    adj = g - np.sum(g) * np.diff(nodes) * np.exp(w) / span
    return adj - adj.mean()


def scan_directions(nodes: np.ndarray) -> list[np.ndarray]:
    """Low-frequency probe directions for escaping local registration modes.

    Sinusoids in rescaled time act like local time shifts of curve features;
    a greedy line scan over them relocates a feature by several widths, which
    plain gradient steps cannot do once the overlap with the target vanishes.
    """
    u = (nodes[:-1] - nodes[0]) / (nodes[-1] - nodes[0])
    return [np.sin(2 * np.pi * u), np.cos(2 * np.pi * u),
            np.sin(4 * np.pi * u), np.cos(4 * np.pi * u),
            np.sin(np.pi * u)]


def maximize_base_function(w0: np.ndarray, x: np.ndarray, target: np.ndarray,
                           weight: np.ndarray, k_prior: np.ndarray, grid,
                           max_steps: int = 25, initial_step: float = 1.0,
                           tol: float = 1e-10,
                           x_times: np.ndarray | None = None,
                           end_value: float | None = None,
                           scan: bool = False, scan_amplitude: float = 1.0,
                           scan_rounds: int = 2
                           ) -> tuple[np.ndarray, float, bool]:
    """Projected gradient ascent with backtracking on the base objective.

    Every candidate is endpoint-projected before evaluation, so iterates stay
    on the constraint manifold and the objective never decreases relative to
    the incumbent.  ``scan`` prepends greedy line scans along low-frequency
    directions (candidates accepted only on improvement, so the ascent
    guarantee is untouched).  Returns (w, objective, improved).
    """
    t = _node_times(grid)
    kw = {"x_times": x_times, "end_value": end_value}
    w = project_endpoint(np.asarray(w0, dtype=float), t, end_value=end_value)
    obj = base_objective(w, x, target, weight, k_prior, t, **kw)
    start = obj
    if scan:
        for _round in range(scan_rounds):
            for direction in scan_directions(t):
                best_c = 0.0
                for c in np.linspace(-scan_amplitude, scan_amplitude, 11):
                    if c == 0.0:
                        continue
                    cand = project_endpoint(w + c * direction, t, end_value=end_value)
                    cand_obj = base_objective(cand, x, target, weight, k_prior, t, **kw)
                    if cand_obj > obj:
                        obj, best_c = cand_obj, c
                if best_c != 0.0:
                    w = project_endpoint(w + best_c * direction, t, end_value=end_value)
    step = initial_step
    for _step in range(max_steps):
        g = base_gradient(w, x, target, weight, k_prior, t, **kw)
        g = chart_direction(g, w, t)
        gnorm = float(np.linalg.norm(g))
        if gnorm < 1e-12:
            break
        gain = 0.0
        alpha = step / max(gnorm, 1.0)
        for _bt in range(30):
            cand = project_endpoint(w + alpha * g, t, end_value=end_value)
            cand_obj = base_objective(cand, x, target, weight, k_prior, t, **kw)
            if cand_obj > obj:
                gain = cand_obj - obj
                w, obj = cand, cand_obj
                step = min(alpha * max(gnorm, 1.0) * 2.0, 1e3)
                break
            alpha *= 0.5
        if gain == 0.0 or gain < tol * (1.0 + abs(obj)):
            break
    return w, obj, obj > start + 1e-15
