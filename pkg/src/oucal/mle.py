"""Exact-likelihood estimation of (theta, sigma_sq) from one discretely observed path.

Pipeline: moment-based warm start -> BFGS on -log L in (log theta, log sigma_sq)
-> basin-hopping when the local stage looks unreliable.

The log-likelihood is the standard Gaussian one (both terms negative),

    log L = -n/2 log(2 pi) - 1/2 sum log V - 1/2 sum r_i^2 / V,
    r_i = X_i - X_{i-1} exp(-theta dt),  V = sigma_sq/(2 theta) (1 - exp(-2 theta dt)).
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConstantSeries, OptimizationFailed, ParameterDomainError, TooShort
from .optimizer import HopConfig, basin_hop, bfgs_minimize
from .ou_core import LOG_2PI, OUParams, Trajectory, conditional_variance

log = logging.getLogger(__name__)

RHO_MIN, RHO_MAX = 1e-4, 0.999
THETA_FLOOR = 0.5
TRIGGERS = ("auto", "always", "never")


@dataclass(frozen=True)
class GmmEstimate:
    theta_hat: float
    sigma_sq_hat: float
    rho_hat: float
    rho_clamped: bool
    theta_floored: bool

    @property
    def clamp_applied(self) -> bool:
        return self.rho_clamped or self.theta_floored


@dataclass(frozen=True)
class MleConfig:
    grad_tolerance: float = 1e-6
    max_bfgs_iters: int = 200
    basin_hops: int = 50
    hop_scale: float = 0.5
    hop_temperature: float = 1.0
    nonconvexity_trigger: str = "auto"
    # gradient norm above which a converged-looking BFGS result still triggers hopping
    trigger_grad_norm: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not (self.grad_tolerance > 0 and self.max_bfgs_iters > 0):
            raise ValueError("grad_tolerance and max_bfgs_iters must be positive")
        if self.basin_hops < 0:
            raise ValueError("basin_hops must be >= 0")
        if not (self.hop_scale > 0 and self.hop_temperature > 0):
            raise ValueError("hop_scale and hop_temperature must be positive")
        if self.nonconvexity_trigger not in TRIGGERS:
            raise ValueError(f"nonconvexity_trigger must be one of {TRIGGERS}")


@dataclass(frozen=True)
class EstimationResult:
    params_hat: OUParams
    log_likelihood: float
    converged: bool
    stage_reached: str
    iterations: int
    wall_time: float
    gmm: GmmEstimate | None = None
    grad_norm: float = math.nan

    def to_report(self) -> dict:
        return {
            "theta_hat": self.params_hat.theta,
            "sigma_sq_hat": self.params_hat.sigma_sq,
            "loglik": self.log_likelihood,
            "converged": self.converged,
            "stage": self.stage_reached,
            "iters": self.iterations,
            "wall_time_s": self.wall_time,
        }


def gmm_initialize(trajectory: Trajectory) -> GmmEstimate:
    x = np.asarray(trajectory.x, dtype=np.float64)
    if x.size < 3:
        raise TooShort(f"need at least 3 observations, got {x.size}")
    var = float(np.var(x))
    if var == 0.0:
        raise ConstantSeries("series has zero variance")
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = float(np.corrcoef(x[:-1], x[1:])[0, 1])
    if not math.isfinite(rho):
        raise ConstantSeries("lag-1 correlation undefined (a lagged sub-series is constant)")
    rho_c = min(max(rho, RHO_MIN), RHO_MAX)
    theta_raw = -math.log(rho_c) / trajectory.grid.dt
    theta = max(theta_raw, THETA_FLOOR)
    return GmmEstimate(
        theta_hat=theta,
        sigma_sq_hat=2.0 * theta * var,
        rho_hat=rho_c,
        rho_clamped=rho_c != rho,
        theta_floored=theta != theta_raw,
    )


def _dw_dtheta(theta, dt):
    """d/dtheta of (1 - exp(-2 theta dt)) / (2 theta), series near theta dt = 0."""
    x = 2.0 * theta * dt
    if x < 1e-3:
        return 2.0 * dt * dt * (-0.5 + x / 3.0 - x * x / 8.0 + x ** 3 / 30.0)
    return (x * math.exp(-x) + math.expm1(-x)) / (2.0 * theta * theta)


class LikelihoodWorkspace:
    """Pre-split (previous, next) arrays of one path for repeated evaluation."""

    def __init__(self, trajectory: Trajectory):
        if trajectory.grid.n_steps < 1:
            raise TooShort("need at least one transition")
        self.trajectory = trajectory
        self.dt = trajectory.grid.dt
        self.x_prev = trajectory.x[:-1].copy()
        self.x_next = trajectory.x[1:].copy()
        self.n = self.x_prev.size
        self.resid = np.empty(self.n)

    def _residuals(self, theta):
        np.multiply(self.x_prev, -math.exp(-theta * self.dt), out=self.resid)
        self.resid += self.x_next
        return self.resid

    def loglik(self, theta: float, sigma_sq: float) -> float:
        v = float(conditional_variance(theta, sigma_sq, self.dt))
        r = self._residuals(theta)
        return -0.5 * self.n * (LOG_2PI + math.log(v)) - 0.5 * float(np.dot(r, r)) / v

    def loglik_and_grad(self, theta: float, sigma_sq: float):
        dt = self.dt
        a = math.exp(-theta * dt)
        v = float(conditional_variance(theta, sigma_sq, dt))
        r = self._residuals(theta)
        rr = float(np.dot(r, r))
        ll = -0.5 * self.n * (LOG_2PI + math.log(v)) - 0.5 * rr / v
        dl_dv = (rr / v - self.n) / (2.0 * v)
        dv_dtheta = sigma_sq * _dw_dtheta(theta, dt)
        dr_dtheta_dot_r = dt * a * float(np.dot(self.x_prev, r))
        d_theta = dl_dv * dv_dtheta - dr_dtheta_dot_r / v
        d_sigma_sq = (rr / v - self.n) / (2.0 * sigma_sq)
        return ll, np.array([d_theta, d_sigma_sq])

    def profile_sigma_sq(self, theta: float) -> float:
        """The sigma_sq that zeroes d log L / d sigma_sq at fixed theta."""
        w = -math.expm1(-2.0 * theta * self.dt) / (2.0 * theta)
        r = self._residuals(theta)
        return float(np.dot(r, r)) / (self.n * w)

    def negloglik_log_space(self, z):
        """-log L and its gradient w.r.t. (log theta, log sigma_sq); inf off-domain."""
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            theta, sigma_sq = math.exp(min(z[0], 700.0)), math.exp(min(z[1], 700.0))
            if not (0 < theta < math.inf and 0 < sigma_sq < math.inf):
                return math.inf, np.full(2, math.nan)
            try:
                ll, g = self.loglik_and_grad(theta, sigma_sq)
            except (ValueError, OverflowError, ZeroDivisionError):
                return math.inf, np.full(2, math.nan)
        if not math.isfinite(ll):
            return math.inf, np.full(2, math.nan)
        return -ll, -np.array([g[0] * theta, g[1] * sigma_sq])


def _check(params):
    if not isinstance(params, OUParams):
        raise ParameterDomainError(f"expected OUParams, got {type(params).__name__}")
    return params


def log_likelihood(params: OUParams, trajectory: Trajectory) -> float:
    _check(params)
    return LikelihoodWorkspace(trajectory).loglik(params.theta, params.sigma_sq)


def log_likelihood_gradient(params: OUParams, trajectory: Trajectory) -> np.ndarray:
    """(d/d theta, d/d sigma_sq) of the log-likelihood."""
    _check(params)
    return LikelihoodWorkspace(trajectory).loglik_and_grad(params.theta, params.sigma_sq)[1]


def fit_mle(trajectory: Trajectory, config: MleConfig = MleConfig()) -> EstimationResult:
    t0 = time.perf_counter()
    gmm = None
    try:
        gmm = gmm_initialize(trajectory)
        start = (gmm.theta_hat, gmm.sigma_sq_hat)
    except ConstantSeries:
        var = float(np.var(trajectory.x))
        if not var > 0:
            raise
        start = (THETA_FLOOR, var)
        log.info("GMM undefined, falling back to start (%.3g, %.3g)", *start)

    ws = LikelihoodWorkspace(trajectory)
    obj = ws.negloglik_log_space
    z0 = np.log(np.asarray(start, dtype=np.float64))
    f0, g0 = obj(z0)
    if not math.isfinite(f0):
        raise OptimizationFailed("likelihood is not finite at the initial point")

    best_z, best_f = z0, f0
    stage = "gmm"
    iters = 0
    local = None
    try:
        local = bfgs_minimize(obj, z0, eps=config.grad_tolerance, max_iters=config.max_bfgs_iters)
        stage = "bfgs"
        iters += local.iterations
        if local.fun < best_f:
            best_z, best_f = local.x, local.fun
    except OptimizationFailed as exc:
        log.info("BFGS stage failed: %s", exc)

    if config.basin_hops > 0 and _needs_hopping(config, local, f0):
        hop = basin_hop(
            obj, best_z,
            HopConfig(config.basin_hops, config.hop_scale, config.hop_temperature, config.seed),
            local=local if local is not None and local.fun == best_f else None,
            eps=config.grad_tolerance, max_iters=config.max_bfgs_iters,
        )
        stage = "basinhop"
        if hop.fun < best_f:
            best_z, best_f = hop.x, hop.fun

    if not math.isfinite(best_f):
        raise OptimizationFailed("no stage produced a finite likelihood")
    _, g = obj(best_z)
    gnorm = float(np.linalg.norm(g))
    theta, sigma_sq = float(np.exp(best_z[0])), float(np.exp(best_z[1]))
    return EstimationResult(
        params_hat=OUParams(theta, sigma_sq),
        log_likelihood=-best_f,
        converged=gnorm < config.grad_tolerance,
        stage_reached=stage,
        iterations=iters,
        wall_time=time.perf_counter() - t0,
        gmm=gmm,
        grad_norm=gnorm,
    )


def _needs_hopping(config: MleConfig, local, f_start: float) -> bool:
    if config.nonconvexity_trigger == "always":
        return True
    if config.nonconvexity_trigger == "never":
        return False
    if local is None or not local.converged:
        return True
    if np.linalg.norm(local.grad) > config.trigger_grad_norm:
        return True
    return local.fun > f_start


def _fit_one(args):
    traj, config = args
    try:
        return fit_mle(traj, config)
    except Exception as exc:  # per-path isolation
        return exc


def fit_many(trajectories, config: MleConfig = MleConfig(), workers: int = 1):
    """Fit each path independently; failures come back as exception objects in place."""
    jobs = [(t, config) for t in trajectories]
    if workers <= 1 or len(jobs) < 2:
        return [_fit_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_fit_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
