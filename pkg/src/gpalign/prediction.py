"""Prediction of partially observed curves within the registration model.

A new curve observed on a prefix of the grid is first registered against a
truncated target (the final registration time is selected by scanning a window
of candidates and minimizing the L2 distance between the partial observation
and the target read off at inverse-warp times).  Multivariate normal laws
fitted to the training registered curves and base functions then complete the
registered and base vectors by Gaussian conditioning; the base completion is
projected so the full-domain warp constraint holds (only the unobserved cells
are shifted, which preserves the fitted prefix warp exactly), and the complete
unregistered curve is the completed registered curve composed with the inverse
completed warp.  Bootstrap resampling of the whole pipeline yields pointwise
confidence bands for all three functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import (DegenerateSample, EmptyWindow, OptimizerFailure,
                     SingularObservedBlock)
from .model import ModelConfig, maximize_base_function
from .parallel import parallel_map
from .penalties import PenaltySet, TimeGrid, build_penalty_set, build_time_grid
from .warping import project_endpoint, warp_from_base

RIDGE_FRACTION = 1e-6
_TIME_TOL = 1e-9


@dataclass(frozen=True)
class EmpiricalLaw:
    """Sample mean/covariance of registered curves and of base functions."""

    mu_reg: np.ndarray
    cov_reg: np.ndarray
    mu_base: np.ndarray
    cov_base: np.ndarray
    ridge_reg: float
    ridge_base: float


@dataclass(frozen=True)
class PartialObservation:
    """Values of a new curve at a prefix t_1..t_r of the grid, r < p."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.shape[0] < 2:
            raise ValueError("partial observation needs at least 2 values")
        object.__setattr__(self, "values", v)

    @property
    def r(self) -> int:
        return self.values.shape[0]


@dataclass
class PartialFit:
    """Single-curve registration of a partial observation to a truncated target."""

    t_f: float
    nodes: np.ndarray            # registered-time nodes: grid prefix (+ t_f if off-grid)
    w: np.ndarray                # base values at nodes[:-1]
    warp: np.ndarray             # h(nodes), increasing from t_1 to t_r
    z0: float
    z1: float
    registered_nodes: np.ndarray  # partial curve at warped node times
    obs_grid_count: int          # leading grid coordinates covered by the fit
    distance: float              # selection metric d_{t_f}
    objective: float


@dataclass
class PredictionResult:
    t_f: float
    registered_full: np.ndarray   # (p,)
    warp_full: np.ndarray         # (p,), monotone with exact endpoints
    base_full: np.ndarray         # (p-1,)
    unregistered_full: np.ndarray  # (p,)
    z0: float
    z1: float
    obs_grid_count: int
    fallback_projection: bool = False


@dataclass
class BootstrapBands:
    """Pointwise quantile bands over M*S bootstrapped prediction pipelines."""

    times: np.ndarray
    level: float
    M: int
    S: int
    skipped: int
    seed: int
    point: PredictionResult
    registered_lower: np.ndarray
    registered_upper: np.ndarray
    warp_lower: np.ndarray
    warp_upper: np.ndarray
    unregistered_lower: np.ndarray
    unregistered_upper: np.ndarray


def fit_empirical_laws(registered_estimates: np.ndarray,
                       base_estimates: np.ndarray,
                       ridge: float | None = None,
                       ridge_fraction: float | None = None) -> EmpiricalLaw:
    """Sample means and ridge-stabilized sample covariances of the training fits.

    The default ridge is 1e-6 times the mean diagonal of each covariance,
    which only restores positive definiteness (with N below p the raw sample
    covariances are singular).  For conditioning on long prefixes a heavier
    shrinkage (``ridge_fraction`` around 0.05) guards against the rank-deficient
    gain chasing noise in the observed block; held-out completions degrade
    markedly under the minimal ridge.
    """
    reg = np.asarray(registered_estimates, dtype=float)
    base = np.asarray(base_estimates, dtype=float)
    if reg.ndim != 2 or reg.shape[0] < 2:
        raise DegenerateSample("need at least 2 estimated curves")
    if base.shape[0] != reg.shape[0] or base.shape[1] != reg.shape[1] - 1:
        raise DegenerateSample("base estimates must be (N, p-1)")

    def _law(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        mu = matrix.mean(axis=0)
        cov = np.cov(matrix, rowvar=False, ddof=1)
        cov = np.atleast_2d(0.5 * (cov + cov.T))
        if ridge is not None:
            lam = ridge
        else:
            frac = RIDGE_FRACTION if ridge_fraction is None else ridge_fraction
            lam = frac * float(np.mean(np.diag(cov)))
        return mu, cov + lam * np.eye(cov.shape[0]), lam

    mu_r, cov_r, lam_r = _law(reg)
    mu_b, cov_b, lam_b = _law(base)
    return EmpiricalLaw(mu_reg=mu_r, cov_reg=cov_r, mu_base=mu_b, cov_base=cov_b,
                        ridge_reg=lam_r, ridge_base=lam_b)


def conditional_mvn(mu: np.ndarray, cov: np.ndarray, observed_idx,
                    observed_values, allow_singular: bool = False
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian conditioning of the unobserved block on the observed block.

    Returns the conditional mean and covariance of the complementary indices.
    Raises SingularObservedBlock unless ``allow_singular``, in which case a
    pseudoinverse is used (degenerate directions carry no information).
    """
    mu = np.asarray(mu, dtype=float)
    cov = np.asarray(cov, dtype=float)
    obs = np.asarray(observed_idx, dtype=int)
    vals = np.asarray(observed_values, dtype=float)
    mask = np.ones(mu.shape[0], dtype=bool)
    mask[obs] = False
    un = np.where(mask)[0]
    if un.size == 0:
        return np.empty(0), np.empty((0, 0))
    c_oo = cov[np.ix_(obs, obs)]
    c_uo = cov[np.ix_(un, obs)]
    c_uu = cov[np.ix_(un, un)]
    resid = vals - mu[obs]
    try:
        chol = cho_factor(c_oo)
        gain = cho_solve(chol, c_uo.T).T
    except np.linalg.LinAlgError as exc:
        if not allow_singular:
            raise SingularObservedBlock(str(exc)) from exc
        gain = c_uo @ np.linalg.pinv(c_oo, hermitian=True)
    mean = mu[un] + gain @ resid
    cond_cov = c_uu - gain @ c_uo.T
    return mean, 0.5 * (cond_cov + cond_cov.T)


def _truncation_nodes(grid: TimeGrid, t_f: float) -> tuple[np.ndarray, int]:
    """Registered-time nodes up to t_f and the count of full-grid coordinates
    they cover."""
    t = grid.points
    tol = _TIME_TOL * max(grid.span, 1.0)
    if t_f <= t[0] + tol or t_f >= t[-1] + tol:
        raise ValueError(f"registration time {t_f!r} outside ({t[0]!r}, {t[-1]!r}]")
    n_below = int(np.sum(t < t_f - tol))
    on_grid = n_below < t.shape[0] and abs(t[n_below] - t_f) <= tol
    if on_grid:
        nodes = t[:n_below + 1].copy()
        obs_grid_count = n_below + 1
    else:
        nodes = np.append(t[:n_below], t_f)
        obs_grid_count = n_below
    if nodes.shape[0] < 3:
        raise ValueError(f"registration time {t_f!r} leaves too few nodes")
    return nodes, obs_grid_count


def register_partial(partial: PartialObservation, target_full: np.ndarray,
                     t_f: float, grid: TimeGrid, config: ModelConfig,
                     penalties: PenaltySet,
                     sigma_z0_sq: float = 1.0, sigma_z1_sq: float = 1.0,
                     n_iters: int = 40, max_base_steps: int = 20) -> PartialFit:
    """Register a partial observation to the target truncated at time t_f.

    The warp maps registered times [t_1, t_f] onto observed times [t_1, t_r];
    shift/scale use their Gaussian conditional means with the plugged-in
    variance estimates, alternating with projected ascent on the base function.
    """
    t = grid.points
    r = partial.r
    if r >= t.shape[0]:
        raise ValueError("partial observation must cover fewer points than the grid")
    t_obs = t[:r]
    t_r = t_obs[-1]
    nodes, obs_grid_count = _truncation_nodes(grid, t_f)

    trunc_pen = build_penalty_set(build_time_grid(nodes),
                                  derivative_order_w=penalties.derivative_order_w)
    weight = config.gamma_R * trunc_pen.SigmaInv
    prior_cov = trunc_pen.Sigma_w / config.gamma_w_scalar() \
        + trunc_pen.Pw / config.lambda_w
    chol = cho_factor(prior_cov)
    k_prior = cho_solve(chol, np.eye(prior_cov.shape[0]))
    k_prior = 0.5 * (k_prior + k_prior.T)
    target = np.interp(nodes, t, np.asarray(target_full, dtype=float))

    w = project_endpoint(np.zeros(nodes.shape[0] - 1), nodes, end_value=t_r)
    z0, z1 = 0.0, 1.0
    x = partial.values
    f_a_f = float(target @ weight @ target)
    one = np.ones(nodes.shape[0])
    one_a_one = float(one @ weight @ one)

    def total_objective(w_, z0_, z1_, data_obj):
        return data_obj - 0.5 * z0_ ** 2 / sigma_z0_sq \
            - 0.5 * (z1_ - 1.0) ** 2 / sigma_z1_sq

    best_obj = -np.inf
    for it in range(n_iters):
        h = warp_from_base(w, nodes, end_value=t_r)
        reg = np.interp(h, t_obs, x)
        var1 = 1.0 / (1.0 / sigma_z1_sq + f_a_f)
        z1 = var1 * (1.0 / sigma_z1_sq + float((reg - z0) @ weight @ target))
        var0 = 1.0 / (1.0 / sigma_z0_sq + one_a_one)
        z0 = var0 * float((reg - z1 * target) @ weight @ one)
        w, data_obj, _ = maximize_base_function(
            w, x, z0 + z1 * target, weight, k_prior, nodes,
            max_steps=max_base_steps, x_times=t_obs, end_value=t_r,
            scan=it == 0, scan_rounds=1)
        obj = total_objective(w, z0, z1, data_obj)
        if not obj > best_obj + 1e-10 * (1.0 + abs(obj)):
            best_obj = max(best_obj, obj)
            break
        best_obj = obj
    if not np.isfinite(best_obj):
        raise OptimizerFailure("partial registration produced no finite objective")

    h = warp_from_base(w, nodes, end_value=t_r)
    reg = np.interp(h, t_obs, x)
    hinv_obs = np.interp(t_obs, h, nodes)
    f_u = np.interp(hinv_obs, t, target_full)
    distance = float(np.linalg.norm(x - z0 - z1 * f_u))
    return PartialFit(t_f=float(t_f), nodes=nodes, w=w, warp=h, z0=float(z0),
                      z1=float(z1), registered_nodes=reg,
                      obs_grid_count=obs_grid_count, distance=distance,
                      objective=best_obj)


def select_final_time(partial: PartialObservation, target_full: np.ndarray,
                      window, grid: TimeGrid, config: ModelConfig,
                      penalties: PenaltySet, sigma_z0_sq: float = 1.0,
                      sigma_z1_sq: float = 1.0,
                      n_iters: int = 40) -> tuple[float, PartialFit, dict]:
    """Scan candidate final registration times and keep the L2-minimizing one.

    Ties break to the smallest candidate time, so the selection does not
    depend on the order the window is supplied in.
    """
    cands = sorted(float(c) for c in np.atleast_1d(np.asarray(window, dtype=float)))
    if len(cands) == 0:
        raise EmptyWindow("no candidate registration times supplied")
    if cands[-1] >= grid.tp:
        raise ValueError("candidate registration times must be below the last grid time")
    best: PartialFit | None = None
    distances: dict[float, float] = {}
    for c in cands:
        fit = register_partial(partial, target_full, c, grid, config, penalties,
                               sigma_z0_sq=sigma_z0_sq, sigma_z1_sq=sigma_z1_sq,
                               n_iters=n_iters)
        distances[c] = fit.distance
        if best is None or fit.distance < best.distance:
            best = fit
    return best.t_f, best, distances


def _complete_base(fit: PartialFit, base_suffix: np.ndarray,
                   grid: TimeGrid) -> tuple[np.ndarray, np.ndarray, bool]:
    """Concatenate prefix and completed base values and restore the endpoint.

    Only the unobserved cells receive the log-shift, so the fitted prefix warp
    (including its value t_r at t_f) is preserved exactly.  Falls back to a
    uniform projection when the prefix already exhausts the time budget.
    """
    t = grid.points
    dt = np.diff(t)
    n_obs = fit.w.shape[0]
    raw = np.concatenate([fit.w, base_suffix])
    s_pre = float(np.sum(dt[:n_obs] * np.exp(fit.w)))
    s_suf = float(np.sum(dt[n_obs:] * np.exp(base_suffix)))
    budget = grid.span - s_pre
    fallback = budget <= 0.0 or s_suf <= 0.0
    if fallback:
        base_full = project_endpoint(raw, grid)
    else:
        base_full = raw.copy()
        base_full[n_obs:] += np.log(budget / s_suf)
    warp_full = warp_from_base(base_full, grid)
    return base_full, warp_full, fallback


def _reconstruct_unregistered(fit: PartialFit, registered_full: np.ndarray,
                              warp_full: np.ndarray,
                              grid: TimeGrid) -> np.ndarray:
    """Compose the completed registered curve with the inverse completed warp.

    The off-grid anchor (t_f, value at t_r) is kept as an interpolation node so
    the reconstruction stays exact on the observed prefix up to interpolation.
    """
    t = grid.points
    k = fit.obs_grid_count
    if k < fit.nodes.shape[0]:
        # off-grid registration time: splice the anchor into the node set
        nodes_aug = np.concatenate([t[:k], [fit.t_f], t[k:]])
        values_aug = np.concatenate(
            [registered_full[:k], [fit.registered_nodes[-1]], registered_full[k:]])
        warp_aug = np.concatenate([warp_full[:k], [fit.warp[-1]], warp_full[k:]])
    else:
        nodes_aug, values_aug, warp_aug = t, registered_full, warp_full
    hinv = np.interp(t, warp_aug, nodes_aug)
    return np.interp(hinv, nodes_aug, values_aug)


def predict_complete(partial: PartialObservation, law: EmpiricalLaw, window,
                     grid: TimeGrid, config: ModelConfig, penalties: PenaltySet,
                     sigma_z0_sq: float = 1.0, sigma_z1_sq: float = 1.0,
                     conditioning: str = "conditional",
                     n_iters: int = 40) -> PredictionResult:
    """Select the registration time, complete both function blocks, and
    reconstruct the full unregistered curve.

    The empirical mean of the registered training curves serves as the target.
    ``conditioning="marginal"`` replaces the Gaussian conditional means with
    the unconditional law means (the baseline the conditional version is
    expected to beat).
    """
    if conditioning not in ("conditional", "marginal"):
        raise ValueError("conditioning must be 'conditional' or 'marginal'")
    t_f, fit, _ = select_final_time(partial, law.mu_reg, window, grid, config,
                                    penalties, sigma_z0_sq=sigma_z0_sq,
                                    sigma_z1_sq=sigma_z1_sq, n_iters=n_iters)
    return _complete_from_fit(fit, law, grid, conditioning)


def _complete_from_fit(fit: PartialFit, law: EmpiricalLaw, grid: TimeGrid,
                       conditioning: str = "conditional") -> PredictionResult:
    p = grid.p
    k = fit.obs_grid_count
    obs_reg = np.arange(k)
    reg_prefix = fit.registered_nodes[:k]
    n_base_obs = fit.w.shape[0]
    if conditioning == "conditional":
        reg_mean, _ = conditional_mvn(law.mu_reg, law.cov_reg, obs_reg,
                                      reg_prefix, allow_singular=True)
        base_mean, _ = conditional_mvn(law.mu_base, law.cov_base,
                                       np.arange(n_base_obs), fit.w,
                                       allow_singular=True)
    else:
        reg_mean = law.mu_reg[k:]
        base_mean = law.mu_base[n_base_obs:]
    registered_full = np.concatenate([reg_prefix, reg_mean])
    base_full, warp_full, fallback = _complete_base(fit, base_mean, grid)
    unregistered = _reconstruct_unregistered(fit, registered_full, warp_full, grid)
    return PredictionResult(
        t_f=fit.t_f, registered_full=registered_full, warp_full=warp_full,
        base_full=base_full, unregistered_full=unregistered,
        z0=fit.z0, z1=fit.z1, obs_grid_count=k, fallback_projection=fallback,
    )


def _psd_root(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _mvn_draws(rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray,
               size: int) -> np.ndarray:
    root = _psd_root(cov)
    z = rng.standard_normal((size, mean.shape[0]))
    return mean + z @ root.T


def bootstrap_bands(partial: PartialObservation,
                    registered_estimates: np.ndarray,
                    base_estimates: np.ndarray, window, grid: TimeGrid,
                    config: ModelConfig, penalties: PenaltySet,
                    M: int = 20, S: int = 50, quantile_level: float = 0.95,
                    sigma_z0_sq: float = 1.0, sigma_z1_sq: float = 1.0,
                    ridge: float | None = None,
                    ridge_fraction: float | None = None, seed: int = 0,
                    n_iters: int = 30, threads: int = 1) -> BootstrapBands:
    """Pointwise confidence bands from M outer resamples and S inner futures.

    Each outer iteration redraws the training sample from the fitted normal
    laws, refits the laws, re-registers the partial observation against the
    resampled target (the final registration time is re-selected, so its
    variability propagates into the bands), then draws S conditional futures
    for the registered and base blocks; every sampled base vector is projected
    before its warp and reconstruction are formed.  Failed outer iterations
    are skipped and counted.
    """
    if M < 1 or S < 1:
        raise ValueError("M and S must be at least 1")
    law = fit_empirical_laws(registered_estimates, base_estimates, ridge=ridge,
                             ridge_fraction=ridge_fraction)
    t_f, fit, _ = select_final_time(partial, law.mu_reg, window, grid, config,
                                    penalties, sigma_z0_sq=sigma_z0_sq,
                                    sigma_z1_sq=sigma_z1_sq, n_iters=n_iters)
    point = _complete_from_fit(fit, law, grid)

    n = registered_estimates.shape[0]
    seeds = np.random.SeedSequence(seed).spawn(M)

    def _one_outer(m: int):
        """One resample-refit-redraw pipeline on its own RNG substream."""
        rng = np.random.default_rng(seeds[m])
        try:
            reg_m = _mvn_draws(rng, law.mu_reg, law.cov_reg, n)
            base_m = _mvn_draws(rng, law.mu_base, law.cov_base, n)
            law_m = fit_empirical_laws(reg_m, base_m, ridge=ridge,
                                       ridge_fraction=ridge_fraction)
            _, fit_m, _ = select_final_time(
                partial, law_m.mu_reg, window, grid, config, penalties,
                sigma_z0_sq=sigma_z0_sq, sigma_z1_sq=sigma_z1_sq, n_iters=n_iters)
            k = fit_m.obs_grid_count
            n_base_obs = fit_m.w.shape[0]
            reg_mean, reg_cov = conditional_mvn(
                law_m.mu_reg, law_m.cov_reg, np.arange(k),
                fit_m.registered_nodes[:k], allow_singular=True)
            base_mean, base_cov = conditional_mvn(
                law_m.mu_base, law_m.cov_base, np.arange(n_base_obs), fit_m.w,
                allow_singular=True)
            reg_fut = _mvn_draws(rng, reg_mean, reg_cov, S)
            base_fut = _mvn_draws(rng, base_mean, base_cov, S)
            rows = []
            for s in range(S):
                registered_s = np.concatenate([fit_m.registered_nodes[:k], reg_fut[s]])
                _, warp_s, _ = _complete_base(fit_m, base_fut[s], grid)
                unreg_s = _reconstruct_unregistered(fit_m, registered_s, warp_s, grid)
                rows.append((registered_s, warp_s, unreg_s))
            return rows
        except (OptimizerFailure, SingularObservedBlock, ValueError,
                np.linalg.LinAlgError):
            return None

    outer = parallel_map(_one_outer, range(M), threads)
    reg_samples, warp_samples, unreg_samples = [], [], []
    skipped = 0
    for rows in outer:
        if rows is None:
            skipped += 1
            continue
        for registered_s, warp_s, unreg_s in rows:
            reg_samples.append(registered_s)
            warp_samples.append(warp_s)
            unreg_samples.append(unreg_s)
    if not reg_samples:
        raise OptimizerFailure("every bootstrap iteration failed")

    lo = 0.5 * (1.0 - quantile_level)
    hi = 1.0 - lo

    def _bounds(rows) -> tuple[np.ndarray, np.ndarray]:
        arr = np.asarray(rows)
        return np.quantile(arr, lo, axis=0), np.quantile(arr, hi, axis=0)

    reg_lo, reg_hi = _bounds(reg_samples)
    warp_lo, warp_hi = _bounds(warp_samples)
    unreg_lo, unreg_hi = _bounds(unreg_samples)
    return BootstrapBands(
        times=grid.points.copy(), level=quantile_level, M=M, S=S,
        skipped=skipped, seed=seed, point=point,
        registered_lower=reg_lo, registered_upper=reg_hi,
        warp_lower=warp_lo, warp_upper=warp_hi,
        unregistered_lower=unreg_lo, unregistered_upper=unreg_hi,
    )
