"""Unconstrained minimization: strong-Wolfe line search, BFGS, basin-hopping.

Objectives are callables ``fun(x) -> (value, gradient)`` on 1-D float arrays.
A non-finite value is treated as "step too long" by the line search, which
lets callers encode an infeasible region by returning ``inf``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import LineSearchFailed, NotDescent, OptimizationFailed
from .ou_core import make_rng

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple]


@dataclass(frozen=True)
class ObjectiveFn:
    """Wraps ``evaluate`` and checks the gradient has ``dimension`` entries."""

    evaluate: Objective
    dimension: int

    def __call__(self, x):
        f, g = self.evaluate(x)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (self.dimension,):
            raise ValueError(f"gradient has shape {g.shape}, expected ({self.dimension},)")
        return float(f), g


@dataclass
class BfgsState:
    x: np.ndarray
    H: np.ndarray
    g: np.ndarray
    iteration: int = 0


@dataclass(frozen=True)
class HopConfig:
    n_hops: int = 50
    step_scale: float = 0.5
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_hops < 0:
            raise ValueError("n_hops must be >= 0")
        if not self.step_scale > 0:
            raise ValueError("step_scale must be > 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")


class LineSearchResult(NamedTuple):
    alpha: float
    f: float
    g: np.ndarray
    n_evals: int


class BfgsResult(NamedTuple):
    x: np.ndarray
    fun: float
    converged: bool
    iterations: int
    grad: np.ndarray
    H: np.ndarray
    n_evals: int
    message: str


@dataclass
class HopResult:
    x: np.ndarray
    fun: float
    n_accepted: int
    best_history: list = field(default_factory=list)
    local: BfgsResult | None = None
    n_failed: int = 0


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic through (a, fa, da) and (b, fb, db), or None."""
    if a == b:
        return None
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    t = b - (b - a) * (db + d2 - d1) / denom
    return t if math.isfinite(t) else None


def line_search(fun: Objective, x, p, f0=None, g0=None, *, alpha0=1.0, c1=1e-4, c2=0.9,
                max_iter=50, alpha_max=1e8, refine=True) -> LineSearchResult:
    """Find a step satisfying the strong Wolfe conditions along ``p``.

    Bracketing followed by zoom with safeguarded cubic interpolation. With
    ``refine`` the accepted step gets one extra cubic-interpolation probe, kept
    if it lowers f and still satisfies both conditions; on a quadratic this
    makes the search exact.
    """
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if f0 is None or g0 is None:
        f0, g0 = fun(x)
    d0 = float(np.dot(g0, p))
    if not d0 < 0:
        raise NotDescent(f"g.p = {d0:.3e} is not negative")
    n_evals = 0

    def phi(a):
        nonlocal n_evals
        n_evals += 1
        f, g = fun(x + a * p)
        f = float(f)
        if not math.isfinite(f):
            return math.inf, None, math.nan
        return f, g, float(np.dot(g, p))

    def armijo(a, fa):
        return fa <= f0 + c1 * a * d0

    def curvature(da):
        return abs(da) <= -c2 * d0

    def finish(a, fa, ga, da):
        if refine and da != 0.0:
            t = _cubic_min(0.0, f0, d0, a, fa, da)
            if t is not None and t > 0 and abs(t - a) > 1e-12 * a:
                ft, gt, dt = phi(t)
                if ft < fa and armijo(t, ft) and curvature(dt):
                    return LineSearchResult(t, ft, gt, n_evals)
        return LineSearchResult(a, fa, ga, n_evals)

    def zoom(lo, f_lo, d_lo, hi, f_hi, d_hi, iters_left):
        for _ in range(iters_left):
            span = hi - lo
            a = None
            if math.isfinite(f_hi) and math.isfinite(d_hi):
                a = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            lo_b, hi_b = sorted((lo + 0.1 * span, hi - 0.1 * span))
            if a is None or not (lo_b <= a <= hi_b):
                a = lo + 0.5 * span
            fa, ga, da = phi(a)
            if not armijo(a, fa) or fa >= f_lo:
                hi, f_hi, d_hi = a, fa, da
            else:
                if curvature(da):
                    return finish(a, fa, ga, da)
                if da * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo = a, fa, da
            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        raise LineSearchFailed("zoom phase did not find a strong Wolfe step")

    a_prev, f_prev, d_prev = 0.0, f0, d0
    a = float(alpha0)
    for i in range(max_iter):
        fa, ga, da = phi(a)
        if not armijo(a, fa) or (i > 0 and fa >= f_prev):
            return zoom(a_prev, f_prev, d_prev, a, fa, da, max_iter - i)
        if curvature(da):
            return finish(a, fa, ga, da)
        if da >= 0:
            return zoom(a, fa, da, a_prev, f_prev, d_prev, max_iter - i)
        a_prev, f_prev, d_prev = a, fa, da
        a = min(2.0 * a, alpha_max)
    raise LineSearchFailed(f"no strong Wolfe step within {max_iter} iterations")


def bfgs_minimize(fun: Objective, x0, H0=None, eps=1e-6, max_iters=200, trace=None) -> BfgsResult:
    """Quasi-Newton minimization with the inverse-Hessian BFGS update.

    The rank-two update is skipped when ``y.s <= 1e-10 |y| |s|`` so H stays
    positive definite. A failed line search ends the run with
    ``converged=False`` at the last accepted point. ``trace``, if a list,
    receives ``(iteration, f, |g|, alpha)`` rows.
    """
    x = np.array(x0, dtype=np.float64)
    n = x.size
    H = np.eye(n) if H0 is None else np.array(H0, dtype=np.float64)
    f, g = fun(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64)
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizationFailed("objective is not finite at the starting point")
    n_evals = 1
    eye = np.eye(n)
    if trace is not None:
        trace.append((0, f, float(np.linalg.norm(g)), math.nan))
    for k in range(max_iters):
        if np.linalg.norm(g) < eps:
            return BfgsResult(x, f, True, k, g, H, n_evals, "gradient norm below tolerance")
        p = -H @ g
        if not np.dot(g, p) < 0:
            # H lost definiteness to rounding; restart from steepest descent.
            H = eye.copy()
            p = -g
        try:
            ls = line_search(fun, x, p, f, g)
        except LineSearchFailed as exc:
            return BfgsResult(x, f, False, k, g, H, n_evals, str(exc))
        n_evals += ls.n_evals
        s = ls.alpha * p
        x_new = x + s
        g_new = np.asarray(ls.g, dtype=np.float64)
        y = g_new - g
        ys = float(np.dot(y, s))
        if ys > 1e-10 * np.linalg.norm(y) * np.linalg.norm(s):
            rho = 1.0 / ys
            A = eye - rho * np.outer(s, y)
            H = A @ H @ A.T + rho * np.outer(s, s)
            H = 0.5 * (H + H.T)
        x, f, g = x_new, ls.f, g_new
        if trace is not None:
            trace.append((k + 1, f, float(np.linalg.norm(g)), ls.alpha))
    converged = bool(np.linalg.norm(g) < eps)
    return BfgsResult(x, f, converged, max_iters, g, H, n_evals,
                      "gradient norm below tolerance" if converged else "max_iters reached")


def basin_hop(fun: Objective, x0, config: HopConfig = HopConfig(), *, local=None,
              eps=1e-6, max_iters=200) -> HopResult:
    """Perturb, descend with BFGS, Metropolis-accept; return the best point seen.

    ``local`` is an already computed ``bfgs_minimize`` result from ``x0``; pass
    it to avoid repeating the first descent. Hops whose descent raises are
    skipped and counted in ``n_failed``.
    """
    rng = make_rng(config.seed)
    if local is None:
        local = bfgs_minimize(fun, x0, eps=eps, max_iters=max_iters)
    cur_x, cur_f = local.x, local.fun
    best_x, best_f = cur_x.copy(), cur_f
    history = []
    n_acc = 0
    n_failed = 0
    for i in range(config.n_hops):
        step = rng.uniform(-config.step_scale, config.step_scale, size=cur_x.size)
        u = rng.random()
        try:
            r = bfgs_minimize(fun, cur_x + step, eps=eps, max_iters=max_iters)
        except (OptimizationFailed, FloatingPointError, ValueError) as exc:
            log.debug("hop %d skipped: %s", i, exc)
            n_failed += 1
            history.append(best_f)
            continue
        if not math.isfinite(r.fun):
            n_failed += 1
            history.append(best_f)
            continue
        if r.fun < cur_f or u < math.exp(-(r.fun - cur_f) / config.temperature):
            cur_x, cur_f = r.x, r.fun
            n_acc += 1
        if r.fun < best_f:
            best_x, best_f = r.x.copy(), r.fun
        history.append(best_f)
    return HopResult(best_x, best_f, n_acc, history, local, n_failed)
