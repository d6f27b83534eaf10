"""Adapted variational Bayes: closed-form coordinate updates for every
conjugate block, numerical maximization for the base functions, and an
evidence-lower-bound trace for convergence monitoring.

Each iteration performs (step 2) a projected gradient ascent on every base
function with the other blocks held at their q-means, then (step 3) exact
mean-field updates for q(f), q(z0), q(z1), q(eta_f), q(lambda_f),
q(sigma_z0^2), q(sigma_z1^2), in that order.  Because every step-3 update is
the exact argmax of the bound in its block and step 2 never decreases the
w-dependent part, the recorded bound is non-decreasing for the noiseless
model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import digamma, gammaln

from .errors import InconsistentGrid, SingularPrecision
from .model import (LatentState, ModelConfig, WPrior, maximize_base_function,
                    registration_weight)
from .parallel import parallel_map
from .penalties import PenaltySet
from .warping import warp_from_base


@dataclass
class VBState:
    """All q-distribution parameters plus point estimates of base functions."""

    mu_f: np.ndarray
    Sigma_f_q: np.ndarray
    mu_z0: np.ndarray            # length N-1; the N-th shift is -sum
    var_z0: np.ndarray
    mu_z1: np.ndarray            # length N
    var_z1: np.ndarray
    a_q_sigma_z0: float
    b_q_sigma_z0: float
    a_q_sigma_z1: float
    b_q_sigma_z1: float
    c_q_eta_f: float
    d_q_eta_f: float
    c_q_lambda_f: float
    d_q_lambda_f: float
    w_hat: np.ndarray            # (N, p-1), endpoint-projected
    elbo_trace: list = field(default_factory=list)
    # noisy-model extension (None in the noiseless model)
    mu_X: np.ndarray | None = None
    Sigma_X_q: np.ndarray | None = None
    a_q_sigma_Y: float | None = None
    b_q_sigma_Y: float | None = None
    c_q_eta_X: float | None = None
    d_q_eta_X: float | None = None
    c_q_lambda_X: float | None = None
    d_q_lambda_X: float | None = None
    # fit bookkeeping
    converged: bool = False
    stop_reason: str = ""
    n_iterations: int = 0
    line_search_failures: int = 0
    elbo_warnings: list = field(default_factory=list)
    freeze_iteration: int | None = None

    @property
    def n_curves(self) -> int:
        return self.w_hat.shape[0]

    def mu_z0_full(self) -> np.ndarray:
        return np.append(self.mu_z0, -np.sum(self.mu_z0))

    def e_z0_sq_full(self) -> np.ndarray:
        """Second moments E[z0_i^2] for every curve, including the derived one."""
        head = self.var_z0 + self.mu_z0 ** 2
        last = np.sum(self.var_z0) + np.sum(self.mu_z0) ** 2
        return np.append(head, last)

    # expectations of the variance/precision blocks
    def mean_inv_sigma_z0(self) -> float:
        return self.a_q_sigma_z0 / self.b_q_sigma_z0

    def mean_inv_sigma_z1(self) -> float:
        return self.a_q_sigma_z1 / self.b_q_sigma_z1

    def mean_eta_f(self) -> float:
        return self.c_q_eta_f / self.d_q_eta_f

    def mean_lambda_f(self) -> float:
        return self.c_q_lambda_f / self.d_q_lambda_f

    def mean_inv_sigma_Y(self) -> float:
        return self.a_q_sigma_Y / self.b_q_sigma_Y

    def mean_eta_X(self) -> float:
        return self.c_q_eta_X / self.d_q_eta_X

    def mean_lambda_X(self) -> float:
        return self.c_q_lambda_X / self.d_q_lambda_X

    def curves(self, data: np.ndarray) -> np.ndarray:
        """The curves the registration model sees: data, or q-means of X."""
        return data if self.mu_X is None else self.mu_X

    def to_latent_state(self, noisy: bool = False) -> LatentState:
        """Point-estimate latent state, e.g. for initializing a sampler."""
        state = LatentState(
            w=self.w_hat.copy(),
            z0=self.mu_z0_full(),
            z1=self.mu_z1.copy(),
            f=self.mu_f.copy(),
            sigma_z0_sq=self.b_q_sigma_z0 / self.a_q_sigma_z0,
            sigma_z1_sq=self.b_q_sigma_z1 / self.a_q_sigma_z1,
            eta_f=self.mean_eta_f(),
            lambda_f=self.mean_lambda_f(),
        )
        if noisy:
            state.X = self.mu_X.copy()
            state.sigma_Y_sq = self.b_q_sigma_Y / self.a_q_sigma_Y
            state.eta_X = self.mean_eta_X()
            state.lambda_X = self.mean_lambda_X()
        return state


def avb_init(data: np.ndarray, config: ModelConfig,
             penalties: PenaltySet) -> VBState:
    """Identity warps, cross-sectional-mean target, prior-valued q parameters."""
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] != penalties.p:
        raise InconsistentGrid(
            f"data shape {data.shape} does not match grid with p={penalties.p}"
        )
    n = data.shape[0]
    if n < 2:
        raise InconsistentGrid("need at least 2 curves")
    hy = config.hyper
    p = penalties.p
    return VBState(
        mu_f=data.mean(axis=0),
        Sigma_f_q=np.zeros((p, p)),
        mu_z0=np.zeros(n - 1),
        var_z0=np.zeros(n - 1),
        mu_z1=np.ones(n),
        var_z1=np.zeros(n),
        a_q_sigma_z0=hy.a, b_q_sigma_z0=hy.b,
        a_q_sigma_z1=hy.a, b_q_sigma_z1=hy.b,
        c_q_eta_f=hy.c, d_q_eta_f=hy.d,
        c_q_lambda_f=hy.c, d_q_lambda_f=hy.d,
        w_hat=np.zeros((n, p - 1)),
    )


def registered_curves(state: VBState, data: np.ndarray,
                      penalties: PenaltySet) -> np.ndarray:
    """Every curve evaluated at its current warped times."""
    t = penalties.grid.points
    curves = state.curves(data)
    out = np.empty_like(curves)
    for i in range(state.n_curves):
        h = warp_from_base(state.w_hat[i], penalties.grid)
        out[i] = np.interp(h, t, curves[i])
    return out


def maximize_base(state: VBState, curve_index: int, data: np.ndarray,
                  config: ModelConfig, penalties: PenaltySet,
                  wprior: WPrior | None = None,
                  weight: np.ndarray | None = None,
                  max_steps: int = 25, scan: bool = False) -> np.ndarray:
    """Ascend the w-dependent part of the bound for one curve.

    Returns the projected base function; the incumbent is retained when no
    ascent direction is found (counted on the state).
    """
    if wprior is None:
        wprior = WPrior(config, penalties, state.n_curves)
    if weight is None:
        weight = registration_weight(config, penalties)
    i = curve_index
    target = state.mu_z0_full()[i] + state.mu_z1[i] * state.mu_f
    x = state.curves(data)[i]
    k = wprior.precision(i)
    w, _, improved = maximize_base_function(
        state.w_hat[i], x, target, weight, k, penalties.grid,
        max_steps=max_steps, scan=scan,
    )
    if not improved and np.any(state.w_hat[i] != w):
        state.line_search_failures += 1
    return w


def update_q_f(state: VBState, data: np.ndarray, config: ModelConfig,
               penalties: PenaltySet, weight: np.ndarray | None = None,
               registered: np.ndarray | None = None) -> VBState:
    """Gaussian update for the target: precision is the summed registration
    weight scaled by E[z1_i^2] plus the prior precision at the current
    precision means."""
    if weight is None:
        weight = registration_weight(config, penalties)
    if registered is None:
        registered = registered_curves(state, data, penalties)
    e_z1_sq = np.sum(state.var_z1 + state.mu_z1 ** 2)
    prec = e_z1_sq * weight \
        + state.mean_eta_f() * penalties.P1ginv \
        + state.mean_lambda_f() * penalties.P2ginv
    m0 = state.mu_z0_full()
    rhs = weight @ (state.mu_z1[:, None] * (registered - m0[:, None])).sum(axis=0)
    try:
        c, low = cho_factor(prec)
    except np.linalg.LinAlgError as exc:
        raise SingularPrecision(str(exc)) from exc
    eye = np.eye(penalties.p)
    state.Sigma_f_q = cho_solve((c, low), eye)
    state.Sigma_f_q = 0.5 * (state.Sigma_f_q + state.Sigma_f_q.T)
    state.mu_f = cho_solve((c, low), rhs)
    return state


def update_q_z0(state: VBState, data: np.ndarray, config: ModelConfig,
                penalties: PenaltySet, weight: np.ndarray | None = None,
                registered: np.ndarray | None = None) -> VBState:
    """Gaussian updates for the N-1 free shifts, sequentially.

    Each shift enters two registration kernels (its own curve and the N-th,
    through the sum-to-zero constraint), hence the factor 2 on the data
    precision.
    """
    if weight is None:
        weight = registration_weight(config, penalties)
    if registered is None:
        registered = registered_curves(state, data, penalties)
    n = state.n_curves
    one = np.ones(penalties.p)
    a_one = weight @ one
    quad = float(one @ a_one)
    var = 1.0 / (state.mean_inv_sigma_z0() + 2.0 * quad)
    for i in range(n - 1):
        d_i = registered[i] - registered[n - 1] \
            + (state.mu_z1[n - 1] - state.mu_z1[i]) * state.mu_f
        others = float(np.sum(state.mu_z0)) - state.mu_z0[i]
        state.var_z0[i] = var
        state.mu_z0[i] = var * (float(d_i @ a_one) - others * quad)
    return state


def update_q_z1(state: VBState, data: np.ndarray, config: ModelConfig,
                penalties: PenaltySet, weight: np.ndarray | None = None,
                registered: np.ndarray | None = None) -> VBState:
    """Gaussian updates for the scales; the prior mean 1 contributes its
    precision to the location."""
    if weight is None:
        weight = registration_weight(config, penalties)
    if registered is None:
        registered = registered_curves(state, data, penalties)
    e_ff = state.Sigma_f_q + np.outer(state.mu_f, state.mu_f)
    quad = float(np.sum(e_ff * weight))
    var = 1.0 / (state.mean_inv_sigma_z1() + quad)
    m0 = state.mu_z0_full()
    a_mu_f = weight @ state.mu_f
    for i in range(state.n_curves):
        loc = state.mean_inv_sigma_z1() + float((registered[i] - m0[i]) @ a_mu_f)
        state.var_z1[i] = var
        state.mu_z1[i] = var * loc
    return state


def update_q_eta_f(state: VBState, config: ModelConfig,
                   penalties: PenaltySet) -> VBState:
    e_ff = state.Sigma_f_q + np.outer(state.mu_f, state.mu_f)
    state.c_q_eta_f = config.hyper.c + 1.0
    state.d_q_eta_f = config.hyper.d + 0.5 * float(np.sum(e_ff * penalties.P1ginv))
    return state


def update_q_lambda_f(state: VBState, config: ModelConfig,
                      penalties: PenaltySet) -> VBState:
    e_ff = state.Sigma_f_q + np.outer(state.mu_f, state.mu_f)
    state.c_q_lambda_f = config.hyper.c + 0.5 * (penalties.p - 2)
    state.d_q_lambda_f = config.hyper.d + 0.5 * float(np.sum(e_ff * penalties.P2ginv))
    return state


def update_q_sigma_z0(state: VBState, config: ModelConfig) -> VBState:
    n = state.n_curves
    state.a_q_sigma_z0 = config.hyper.a + 0.5 * (n - 1)
    state.b_q_sigma_z0 = config.hyper.b + 0.5 * float(
        np.sum(state.var_z0 + state.mu_z0 ** 2))
    return state


def update_q_sigma_z1(state: VBState, config: ModelConfig) -> VBState:
    n = state.n_curves
    state.a_q_sigma_z1 = config.hyper.a + 0.5 * n
    state.b_q_sigma_z1 = config.hyper.b + 0.5 * float(
        np.sum(state.var_z1 + (state.mu_z1 - 1.0) ** 2))
    return state


def _gamma_block_elbo(c: float, d: float, c_q: float, d_q: float) -> float:
    e_log = digamma(c_q) - np.log(d_q)
    mean = c_q / d_q
    return (c * np.log(d) - gammaln(c) - c_q * np.log(d_q) + gammaln(c_q)
            + (c - c_q) * e_log + (d_q - d) * mean)


def _ig_block_elbo(a: float, b: float, a_q: float, b_q: float) -> float:
    e_log = np.log(b_q) - digamma(a_q)
    mean_inv = a_q / b_q
    return (a * np.log(b) - gammaln(a) - a_q * np.log(b_q) + gammaln(a_q)
            + (a_q - a) * e_log + (b_q - b) * mean_inv)


def elbo(state: VBState, data: np.ndarray, config: ModelConfig,
         penalties: PenaltySet, wprior: WPrior | None = None,
         weight: np.ndarray | None = None,
         registered: np.ndarray | None = None) -> float:
    """Evidence lower bound of the noiseless model, dropping terms that are
    constant across iterations.  Valid once a full update sweep has run."""
    if wprior is None:
        wprior = WPrior(config, penalties, state.n_curves)
    if weight is None:
        weight = registration_weight(config, penalties)
    if registered is None:
        registered = registered_curves(state, data, penalties)
    hy = config.hyper
    n = state.n_curves
    p = penalties.p

    m0 = state.mu_z0_full()
    e_z0_sq = state.e_z0_sq_full()
    e_z1_sq = state.var_z1 + state.mu_z1 ** 2
    e_ff = state.Sigma_f_q + np.outer(state.mu_f, state.mu_f)
    one = np.ones(p)
    a_one = weight @ one
    one_a_one = float(one @ a_one)
    one_a_muf = float(a_one @ state.mu_f)
    tr_a_eff = float(np.sum(e_ff * weight))

    total = 0.0
    for i in range(n):
        xh = registered[i]
        total += -0.5 * (
            float(xh @ weight @ xh)
            - 2.0 * m0[i] * float(xh @ a_one)
            - 2.0 * state.mu_z1[i] * float(xh @ weight @ state.mu_f)
            + e_z0_sq[i] * one_a_one
            + 2.0 * m0[i] * state.mu_z1[i] * one_a_muf
            + e_z1_sq[i] * tr_a_eff
        )
        total += wprior.log_kernel(state.w_hat[i], i)

    # target block
    e_log_eta = digamma(state.c_q_eta_f) - np.log(state.d_q_eta_f)
    e_log_lam = digamma(state.c_q_lambda_f) - np.log(state.d_q_lambda_f)
    sign, logdet = np.linalg.slogdet(state.Sigma_f_q)
    if sign <= 0:
        raise SingularPrecision("Sigma_f_q is not positive definite")
    total += e_log_eta + 0.5 * (p - 2) * e_log_lam
    total += -0.5 * float(np.sum(e_ff * (state.mean_eta_f() * penalties.P1ginv
                                         + state.mean_lambda_f() * penalties.P2ginv)))
    total += 0.5 * logdet + 0.5 * p

    # shift and scale blocks
    e_log_s0 = np.log(state.b_q_sigma_z0) - digamma(state.a_q_sigma_z0)
    total += 0.5 * float(np.sum(np.log(state.var_z0))) \
        - 0.5 * (n - 1) * e_log_s0 \
        - 0.5 * state.mean_inv_sigma_z0() * float(np.sum(state.var_z0 + state.mu_z0 ** 2)) \
        + 0.5 * (n - 1)
    e_log_s1 = np.log(state.b_q_sigma_z1) - digamma(state.a_q_sigma_z1)
    total += 0.5 * float(np.sum(np.log(state.var_z1))) \
        - 0.5 * n * e_log_s1 \
        - 0.5 * state.mean_inv_sigma_z1() * float(
            np.sum(state.var_z1 + (state.mu_z1 - 1.0) ** 2)) \
        + 0.5 * n

    total += _ig_block_elbo(hy.a, hy.b, state.a_q_sigma_z0, state.b_q_sigma_z0)
    total += _ig_block_elbo(hy.a, hy.b, state.a_q_sigma_z1, state.b_q_sigma_z1)
    total += _gamma_block_elbo(hy.c, hy.d, state.c_q_eta_f, state.d_q_eta_f)
    total += _gamma_block_elbo(hy.c, hy.d, state.c_q_lambda_f, state.d_q_lambda_f)
    return float(total)


def sweep(state: VBState, data: np.ndarray, config: ModelConfig,
          penalties: PenaltySet, wprior: WPrior,
          weight: np.ndarray | None = None,
          max_base_steps: int = 25, threads: int = 1,
          scan: bool = False) -> np.ndarray:
    """One full AVB iteration (base maximization then ordered q updates).

    The per-curve maximizations are independent and may run on threads; the
    q updates are order-dependent and always sequential.  Returns the
    registered curves at the new base functions so callers can reuse them for
    the bound.
    """
    if weight is None:
        weight = registration_weight(config, penalties)
    m0 = state.mu_z0_full()
    curves = state.curves(data)
    for i in range(state.n_curves):
        wprior.precision(i)  # warm the factorization cache before threading

    def _one(i: int):
        target = m0[i] + state.mu_z1[i] * state.mu_f
        return maximize_base_function(
            state.w_hat[i], curves[i], target, weight, wprior.precision(i),
            penalties.grid, max_steps=max_base_steps, scan=scan)

    results = parallel_map(_one, range(state.n_curves), threads)
    for i, (w, _, improved) in enumerate(results):
        if not improved and np.any(w != state.w_hat[i]):
            state.line_search_failures += 1
        state.w_hat[i] = w
    registered = registered_curves(state, data, penalties)
    update_q_f(state, data, config, penalties, weight, registered)
    update_q_z0(state, data, config, penalties, weight, registered)
    update_q_z1(state, data, config, penalties, weight, registered)
    update_q_eta_f(state, config, penalties)
    update_q_lambda_f(state, config, penalties)
    update_q_sigma_z0(state, config)
    update_q_sigma_z1(state, config)
    return registered


def _param_vector(state: VBState) -> np.ndarray:
    parts = [state.mu_f, state.mu_z0, state.mu_z1, state.w_hat.ravel(),
             np.array([state.b_q_sigma_z0, state.b_q_sigma_z1,
                       state.d_q_eta_f, state.d_q_lambda_f])]
    return np.concatenate(parts)


def avb_fit(data: np.ndarray, config: ModelConfig, penalties: PenaltySet,
            tol: float = 1e-6, max_iters: int = 500,
            schedule: list[tuple[float, float, int]] | None = None,
            max_base_steps: int = 60, threads: int = 1,
            rescan_every: int = 10) -> VBState:
    """Run the adapted variational Bayes algorithm to convergence.

    Stops when the largest absolute parameter change or the bound change in
    one iteration falls below ``tol``; ``stop_reason`` records which fired.
    ``schedule`` optionally prepends penalty phases as (gamma_R, gamma_w,
    n_iters) triples, run before the final phase with the config's own
    penalties; the bound is monotone within each phase.
    """
    data = np.asarray(data, dtype=float)
    config.validate(data.shape[0])
    state = avb_init(data, config, penalties)

    phases: list[tuple[ModelConfig, int | None]] = []
    if schedule:
        for g_r, g_w, iters in schedule:
            phase_cfg = ModelConfig(gamma_R=g_r, gamma_w=g_w,
                                    lambda_w=config.lambda_w, hyper=config.hyper)
            phases.append((phase_cfg, iters))
    phases.append((config, None))

    total_iters = 0
    for phase_cfg, phase_iters in phases:
        wprior = WPrior(phase_cfg, penalties, data.shape[0])
        weight = registration_weight(phase_cfg, penalties)
        limit = phase_iters if phase_iters is not None else max_iters - total_iters
        final_phase = phase_iters is None
        for phase_it in range(max(limit, 0)):
            prev = _param_vector(state)
            scan = rescan_every > 0 and phase_it % rescan_every == 0
            registered = sweep(state, data, phase_cfg, penalties, wprior, weight,
                               max_base_steps=max_base_steps, threads=threads,
                               scan=scan)
            state.elbo_trace.append(
                elbo(state, data, phase_cfg, penalties, wprior, weight, registered))
            total_iters += 1
            delta = float(np.max(np.abs(_param_vector(state) - prev)))
            if final_phase and delta < tol:
                state.converged = True
                state.stop_reason = "parameter_change"
                break
            if final_phase and len(state.elbo_trace) >= 2 and \
                    abs(state.elbo_trace[-1] - state.elbo_trace[-2]) < tol:
                state.converged = True
                state.stop_reason = "elbo_change"
                break
        if state.converged:
            break
    if not state.converged:
        state.stop_reason = "max_iters"
    state.n_iterations = total_iters
    return state
