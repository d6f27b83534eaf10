"""Metropolis-within-Gibbs sampler for the registration model.

Every conjugate block (target, shifts, scales, variance components, and in the
noisy model the latent smooth curves and noise precisions) is redrawn from its
exact full conditional; base functions are updated by a random-walk Metropolis
step followed by endpoint projection, which is symmetric in the chart that
parameterizes the constraint manifold, so plain kernel differences give the
acceptance ratio.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import NonFiniteDraw
from .model import LatentState, ModelConfig, WPrior, registration_weight
from .penalties import PenaltySet
from .warping import project_endpoint, warp_from_base

ADAPT_INTERVAL = 25
ADAPT_LOW = 0.20
ADAPT_HIGH = 0.40


@dataclass
class ChainState:
    latent: LatentState
    rng: np.random.Generator
    step_sizes: np.ndarray
    accept_counts: np.ndarray
    propose_counts: np.ndarray

    @classmethod
    def create(cls, latent: LatentState, seed: int, step_scale: float) -> "ChainState":
        n = latent.n_curves
        return cls(
            latent=latent,
            rng=np.random.default_rng(seed),
            step_sizes=np.full(n, step_scale, dtype=float),
            accept_counts=np.zeros(n, dtype=int),
            propose_counts=np.zeros(n, dtype=int),
        )


@dataclass
class ChainOutput:
    """Thinned draws of every block plus acceptance diagnostics."""

    times: np.ndarray
    f: np.ndarray                    # (K, p)
    z0: np.ndarray                   # (K, N)
    z1: np.ndarray                   # (K, N)
    sigma_z0_sq: np.ndarray          # (K,)
    sigma_z1_sq: np.ndarray
    eta_f: np.ndarray
    lambda_f: np.ndarray
    w: np.ndarray                    # (K, N, p-1)
    registered: np.ndarray           # (K, N, p)
    acceptance_rates: np.ndarray     # (N,)
    seed: int
    iters: int
    burn_in: int
    thin: int
    config_echo: dict
    X: np.ndarray | None = None      # (K, N, p) noisy model
    sigma_Y_sq: np.ndarray | None = None
    eta_X: np.ndarray | None = None
    lambda_X: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.f.shape[0]

    def registered_posterior_mean(self) -> np.ndarray:
        return self.registered.mean(axis=0)

    def credible_band(self, block: str = "f", level: float = 0.95):
        """Pointwise empirical quantiles of the thinned draws of one block."""
        draws = getattr(self, block)
        lo = 0.5 * (1.0 - level)
        return (np.quantile(draws, lo, axis=0),
                np.quantile(draws, 1.0 - lo, axis=0))

    def to_csv(self, directory) -> None:
        """One file per block, one row per stored draw."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        flat = {
            "f": self.f, "z0": self.z0, "z1": self.z1,
            "sigma_z0_sq": self.sigma_z0_sq[:, None],
            "sigma_z1_sq": self.sigma_z1_sq[:, None],
            "eta_f": self.eta_f[:, None], "lambda_f": self.lambda_f[:, None],
            "w": self.w.reshape(self.n_draws, -1),
            "registered": self.registered.reshape(self.n_draws, -1),
        }
        if self.X is not None:
            flat["X"] = self.X.reshape(self.n_draws, -1)
            flat["sigma_Y_sq"] = self.sigma_Y_sq[:, None]
            flat["eta_X"] = self.eta_X[:, None]
            flat["lambda_X"] = self.lambda_X[:, None]
        for name, arr in flat.items():
            with open(directory / f"draws_{name}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerows([[f"{v:.17g}" for v in row] for row in arr])


def _check_finite(value, block: str):
    if not np.all(np.isfinite(value)):
        raise NonFiniteDraw(block)
    return value


def _draw_ig(rng: np.random.Generator, shape: float, rate: float) -> float:
    return 1.0 / rng.gamma(shape, 1.0 / rate)


def _mvn_from_precision(rng: np.random.Generator, prec: np.ndarray,
                        rhs: np.ndarray) -> np.ndarray:
    """Draw from N(prec^{-1} rhs, prec^{-1}) via one Cholesky factorization."""
    c, low = cho_factor(prec)
    mean = cho_solve((c, low), rhs)
    z = rng.standard_normal(prec.shape[0])
    noise = solve_triangular(c, z, lower=low, trans="T" if low else "N")
    return mean + noise


def registered_draws(latent: LatentState, data: np.ndarray,
                     penalties: PenaltySet) -> np.ndarray:
    t = penalties.grid.points
    curves = data if latent.X is None else latent.X
    out = np.empty((latent.n_curves, penalties.p))
    for i in range(latent.n_curves):
        h = warp_from_base(latent.w[i], penalties.grid)
        out[i] = np.interp(h, t, curves[i])
    return out


def current_weight(latent: LatentState, config: ModelConfig,
                   penalties: PenaltySet) -> np.ndarray:
    if config.noisy:
        return registration_weight(config, penalties, latent.eta_X, latent.lambda_X)
    return registration_weight(config, penalties)


def draw_f(latent: LatentState, registered: np.ndarray, weight: np.ndarray,
           penalties: PenaltySet, rng: np.random.Generator) -> np.ndarray:
    prec = float(np.sum(latent.z1 ** 2)) * weight \
        + latent.eta_f * penalties.P1ginv + latent.lambda_f * penalties.P2ginv
    rhs = weight @ (latent.z1[:, None] * (registered - latent.z0[:, None])).sum(axis=0)
    return _check_finite(_mvn_from_precision(rng, prec, rhs), "f")


def z0_conditional(latent: LatentState, i: int, registered: np.ndarray,
                   weight: np.ndarray) -> tuple[float, float]:
    """Mean and variance of the i-th free shift given everything else."""
    n = latent.n_curves
    one_w = weight.sum(axis=0)
    quad = float(one_w.sum())
    var = 1.0 / (1.0 / latent.sigma_z0_sq + 2.0 * quad)
    d_i = registered[i] - registered[n - 1] \
        + (latent.z1[n - 1] - latent.z1[i]) * latent.f
    others = float(np.sum(latent.z0[:-1])) - latent.z0[i]
    mean = var * (float(d_i @ one_w) - others * quad)
    return mean, var


def draw_z0(latent: LatentState, registered: np.ndarray, weight: np.ndarray,
            rng: np.random.Generator) -> None:
    for i in range(latent.n_curves - 1):
        mean, var = z0_conditional(latent, i, registered, weight)
        latent.z0[i] = mean + np.sqrt(var) * rng.standard_normal()
    latent.enforce_sum_zero()
    _check_finite(latent.z0, "z0")


def z1_conditional(latent: LatentState, i: int, registered: np.ndarray,
                   weight: np.ndarray) -> tuple[float, float]:
    quad = float(latent.f @ weight @ latent.f)
    var = 1.0 / (1.0 / latent.sigma_z1_sq + quad)
    loc = 1.0 / latent.sigma_z1_sq + float(
        (registered[i] - latent.z0[i]) @ weight @ latent.f)
    return var * loc, var


def draw_z1(latent: LatentState, registered: np.ndarray, weight: np.ndarray,
            rng: np.random.Generator) -> None:
    for i in range(latent.n_curves):
        mean, var = z1_conditional(latent, i, registered, weight)
        latent.z1[i] = mean + np.sqrt(var) * rng.standard_normal()
    _check_finite(latent.z1, "z1")


def draw_sigma_z0(latent: LatentState, config: ModelConfig,
                  rng: np.random.Generator) -> None:
    n = latent.n_curves
    shape = config.hyper.a + 0.5 * (n - 1)
    rate = config.hyper.b + 0.5 * float(np.sum(latent.z0[:-1] ** 2))
    latent.sigma_z0_sq = _check_finite(_draw_ig(rng, shape, rate), "sigma_z0_sq")


def draw_sigma_z1(latent: LatentState, config: ModelConfig,
                  rng: np.random.Generator) -> None:
    n = latent.n_curves
    shape = config.hyper.a + 0.5 * n
    rate = config.hyper.b + 0.5 * float(np.sum((latent.z1 - 1.0) ** 2))
    latent.sigma_z1_sq = _check_finite(_draw_ig(rng, shape, rate), "sigma_z1_sq")


def draw_eta_f(latent: LatentState, config: ModelConfig, penalties: PenaltySet,
               rng: np.random.Generator) -> None:
    rate = config.hyper.d + 0.5 * float(latent.f @ penalties.P1ginv @ latent.f)
    latent.eta_f = _check_finite(
        rng.gamma(config.hyper.c + 1.0, 1.0 / rate), "eta_f")


def draw_lambda_f(latent: LatentState, config: ModelConfig, penalties: PenaltySet,
                  rng: np.random.Generator) -> None:
    rate = config.hyper.d + 0.5 * float(latent.f @ penalties.P2ginv @ latent.f)
    shape = config.hyper.c + 0.5 * (penalties.p - 2)
    latent.lambda_f = _check_finite(rng.gamma(shape, 1.0 / rate), "lambda_f")


def f_at_inverse_warp(latent: LatentState, i: int,
                      penalties: PenaltySet) -> np.ndarray:
    """Target composed with the inverse warp of curve i, on the grid."""
    t = penalties.grid.points
    h = warp_from_base(latent.w[i], penalties.grid)
    hinv = np.interp(t, h, t)
    return np.interp(hinv, t, latent.f)


def draw_X(latent: LatentState, data: np.ndarray, config: ModelConfig,
           penalties: PenaltySet, rng: np.random.Generator) -> None:
    """Latent smooth curves from their Gaussian conditional (noisy model)."""
    sx_inv = latent.eta_X * penalties.P1ginv + latent.lambda_X * penalties.P2ginv
    prec = np.eye(penalties.p) / latent.sigma_Y_sq + sx_inv
    c, low = cho_factor(prec)
    for i in range(latent.n_curves):
        anchor = latent.z0[i] + latent.z1[i] * f_at_inverse_warp(latent, i, penalties)
        rhs = data[i] / latent.sigma_Y_sq + sx_inv @ anchor
        mean = cho_solve((c, low), rhs)
        z = rng.standard_normal(penalties.p)
        latent.X[i] = mean + solve_triangular(c, z, lower=low,
                                              trans="T" if low else "N")
    _check_finite(latent.X, "X")


def draw_sigma_Y(latent: LatentState, data: np.ndarray, config: ModelConfig,
                 rng: np.random.Generator) -> None:
    n, p = data.shape
    shape = config.hyper.a + 0.5 * n * p
    rate = config.hyper.b + 0.5 * float(np.sum((data - latent.X) ** 2))
    latent.sigma_Y_sq = _check_finite(_draw_ig(rng, shape, rate), "sigma_Y_sq")


def _smooth_residuals(latent: LatentState, penalties: PenaltySet) -> np.ndarray:
    out = np.empty_like(latent.X)
    for i in range(latent.n_curves):
        out[i] = latent.X[i] - latent.z0[i] \
            - latent.z1[i] * f_at_inverse_warp(latent, i, penalties)
    return out


def draw_eta_X(latent: LatentState, config: ModelConfig, penalties: PenaltySet,
               rng: np.random.Generator) -> None:
    r = _smooth_residuals(latent, penalties)
    rate = config.hyper.d + 0.5 * float(np.sum((r @ penalties.P1ginv) * r))
    shape = config.hyper.c + latent.n_curves
    latent.eta_X = _check_finite(rng.gamma(shape, 1.0 / rate), "eta_X")


def draw_lambda_X(latent: LatentState, config: ModelConfig, penalties: PenaltySet,
                  rng: np.random.Generator) -> None:
    r = _smooth_residuals(latent, penalties)
    rate = config.hyper.d + 0.5 * float(np.sum((r @ penalties.P2ginv) * r))
    shape = config.hyper.c + 0.5 * latent.n_curves * (penalties.p - 2)
    latent.lambda_X = _check_finite(rng.gamma(shape, 1.0 / rate), "lambda_X")


def gibbs_sweep(state: ChainState, data: np.ndarray, config: ModelConfig,
                penalties: PenaltySet) -> ChainState:
    """Redraw every conjugate block from its full conditional, in order."""
    latent = state.latent
    rng = state.rng
    if config.noisy:
        draw_X(latent, data, config, penalties, rng)
    registered = registered_draws(latent, data, penalties)
    weight = current_weight(latent, config, penalties)
    latent.f = draw_f(latent, registered, weight, penalties, rng)
    if config.noisy:
        draw_sigma_Y(latent, data, config, rng)
        draw_eta_X(latent, config, penalties, rng)
        draw_lambda_X(latent, config, penalties, rng)
        weight = current_weight(latent, config, penalties)
    draw_z0(latent, registered, weight, rng)
    draw_sigma_z0(latent, config, rng)
    draw_z1(latent, registered, weight, rng)
    draw_sigma_z1(latent, config, rng)
    draw_eta_f(latent, config, penalties, rng)
    draw_lambda_f(latent, config, penalties, rng)
    return state


def base_log_target(latent: LatentState, i: int, w: np.ndarray,
                    data: np.ndarray, config: ModelConfig,
                    penalties: PenaltySet, wprior: WPrior) -> float:
    """Log-kernel of the constrained conditional of one base function.

    Only the registration factor and the base prior depend on w_i; the
    registration factor always carries weight gamma_R * SigmaInv (in the noisy
    model the roughness factor is tied to the unregistered curve instead).
    """
    t = penalties.grid.points
    curve = data[i] if latent.X is None else latent.X[i]
    h = warp_from_base(w, penalties.grid)
    xh = np.interp(h, t, curve)
    r = xh - latent.z0[i] - latent.z1[i] * latent.f
    quad = config.gamma_R * float(r @ penalties.SigmaInv @ r)
    return -0.5 * quad + wprior.log_kernel(w, i)


def metropolis_base(state: ChainState, curve_index: int, data: np.ndarray,
                    config: ModelConfig, penalties: PenaltySet,
                    wprior: WPrior) -> ChainState:
    """Random-walk proposal on one base function with endpoint projection.

    The projection removes the component of the step along the constant
    direction, leaving a symmetric proposal on the constraint manifold, so the
    acceptance ratio is the plain kernel difference.
    """
    latent = state.latent
    i = curve_index
    state.propose_counts[i] += 1
    eps = state.step_sizes[i] * state.rng.standard_normal(latent.w.shape[1])
    proposal = project_endpoint(latent.w[i] + eps, penalties.grid)
    delta = base_log_target(latent, i, proposal, data, config, penalties, wprior) \
        - base_log_target(latent, i, latent.w[i], data, config, penalties, wprior)
    if np.log(state.rng.uniform()) < delta:
        latent.w[i] = proposal
        state.accept_counts[i] += 1
    return state


def _init_latent(data: np.ndarray, config: ModelConfig, penalties: PenaltySet,
                 init) -> LatentState:
    n, p = data.shape
    if init is not None:
        latent = init.to_latent_state(noisy=config.noisy)
        if config.noisy and latent.X is None:
            latent.X = data.copy()
        return latent
    latent = LatentState(
        w=np.zeros((n, p - 1)),
        z0=np.zeros(n),
        z1=np.ones(n),
        f=data.mean(axis=0),
        sigma_z0_sq=1.0, sigma_z1_sq=1.0, eta_f=1.0, lambda_f=1.0,
    )
    if config.noisy:
        latent.X = data.copy()
        latent.sigma_Y_sq = 1.0
        latent.eta_X = 1.0
        latent.lambda_X = 1.0
    return latent


def run_chain(data: np.ndarray, config: ModelConfig, penalties: PenaltySet,
              iters: int, burn_in: int = 0, thin: int = 1,
              init=None, seed: int = 0, step_scale: float = 0.05,
              adapt: bool | None = None) -> ChainOutput:
    """Run the sampler and return thinned draws.

    ``init`` may be a fitted VBState, which makes burn-in largely unnecessary.
    Proposal scales adapt toward 20-40% acceptance during burn-in and are
    frozen afterwards.  Fully reproducible from the seed.
    """
    data = np.asarray(data, dtype=float)
    if burn_in < 0 or iters <= burn_in:
        raise ValueError("need iters > burn_in >= 0")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    config.validate(data.shape[0])
    if adapt is None:
        adapt = burn_in > 0

    n, p = data.shape
    latent = _init_latent(data, config, penalties, init)
    state = ChainState.create(latent, seed, step_scale)
    wprior = WPrior(config, penalties, n)

    n_store = (iters - burn_in) // thin
    out = ChainOutput(
        times=penalties.grid.points.copy(),
        f=np.empty((n_store, p)),
        z0=np.empty((n_store, n)), z1=np.empty((n_store, n)),
        sigma_z0_sq=np.empty(n_store), sigma_z1_sq=np.empty(n_store),
        eta_f=np.empty(n_store), lambda_f=np.empty(n_store),
        w=np.empty((n_store, n, p - 1)),
        registered=np.empty((n_store, n, p)),
        acceptance_rates=np.zeros(n),
        seed=seed, iters=iters, burn_in=burn_in, thin=thin,
        config_echo={
            "gamma_R": config.gamma_R,
            "gamma_w": np.atleast_1d(config.gamma_w).tolist(),
            "lambda_w": config.lambda_w, "noisy": config.noisy,
        },
    )
    if config.noisy:
        out.X = np.empty((n_store, n, p))
        out.sigma_Y_sq = np.empty(n_store)
        out.eta_X = np.empty(n_store)
        out.lambda_X = np.empty(n_store)

    window_accept = np.zeros(n)
    window_propose = np.zeros(n)
    k = 0
    for it in range(1, iters + 1):
        gibbs_sweep(state, data, config, penalties)
        before_a = state.accept_counts.copy()
        before_p = state.propose_counts.copy()
        for i in range(n):
            metropolis_base(state, i, data, config, penalties, wprior)
        window_accept += state.accept_counts - before_a
        window_propose += state.propose_counts - before_p

        if adapt and it <= burn_in and it % ADAPT_INTERVAL == 0:
            rates = window_accept / np.maximum(window_propose, 1)
            state.step_sizes[rates < ADAPT_LOW] *= 0.7
            state.step_sizes[rates > ADAPT_HIGH] *= 1.4
            window_accept[:] = 0
            window_propose[:] = 0

        if it > burn_in and (it - burn_in) % thin == 0:
            lt = state.latent
            out.f[k] = lt.f
            out.z0[k] = lt.z0
            out.z1[k] = lt.z1
            out.sigma_z0_sq[k] = lt.sigma_z0_sq
            out.sigma_z1_sq[k] = lt.sigma_z1_sq
            out.eta_f[k] = lt.eta_f
            out.lambda_f[k] = lt.lambda_f
            out.w[k] = lt.w
            out.registered[k] = registered_draws(lt, data, penalties)
            if config.noisy:
                out.X[k] = lt.X
                out.sigma_Y_sq[k] = lt.sigma_Y_sq
                out.eta_X[k] = lt.eta_X
                out.lambda_X[k] = lt.lambda_X
            k += 1

    denom = np.maximum(state.propose_counts, 1)
    out.acceptance_rates = state.accept_counts / denom
    return out
