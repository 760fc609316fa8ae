"""Ornstein-Uhlenbeck process: domain types, exact simulation, transition law.

The process is ``dX = -theta * X dt + sigma dW`` with long-run mean zero.
Its transition over a gap ``dt`` is Gaussian with mean ``x' exp(-theta dt)``
and variance ``V(dt) = sigma^2 / (2 theta) * (1 - exp(-2 theta dt))``, which
is all the simulator and the likelihood need.

Randomness
----------
Every trajectory draws from its own ``numpy.random.Philox`` stream
(counter-based, 64-bit keys) seeded through ``numpy.random.SeedSequence``.
Normal variates come from ``Generator.standard_normal`` (ziggurat).
"""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import DegenerateGrid, ParameterDomainError

INIT_MODES = ("uniform_k_sigma", "fixed", "stationary")

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class OUParams:
    theta: float
    sigma_sq: float

    def __post_init__(self):
        for name in ("theta", "sigma_sq"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float, np.floating, np.integer)) and math.isfinite(v) and v > 0):
                raise ParameterDomainError(f"{name} must be finite and > 0, got {v!r}")
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "sigma_sq", float(self.sigma_sq))

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma_sq)

    def stationary_variance(self) -> float:
        return self.sigma_sq / (2.0 * self.theta)

    def as_tuple(self) -> tuple[float, float]:
        return (self.theta, self.sigma_sq)


@dataclass(frozen=True)
class GridSpec:
    dt: float = 0.01
    n_steps: int = 500

    def __post_init__(self):
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise DegenerateGrid(f"dt must be > 0, got {self.dt!r}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise DegenerateGrid(f"n_steps must be an integer >= 1, got {self.n_steps!r}")
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


@dataclass(frozen=True, eq=False)
class Trajectory:
    x: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("trajectory values must be one-dimensional")
        if x.size != self.grid.n_steps + 1:
            raise DegenerateGrid(
                f"expected {self.grid.n_steps + 1} values for {self.grid.n_steps} steps, got {x.size}"
            )
        if not np.all(np.isfinite(x)):
            raise ValueError("trajectory contains NaN or Inf")
        x.flags.writeable = False
        object.__setattr__(self, "x", x)

    @classmethod
    def from_values(cls, x, dt: float) -> "Trajectory":
        x = np.asarray(x, dtype=np.float64)
        return cls(x, GridSpec(dt, x.size - 1))

    def __len__(self):
        return self.x.size

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.x, other.x)

    __hash__ = None


@dataclass(frozen=True)
class TransitionMoments:
    mean: float
    variance: float


@dataclass(frozen=True)
class SimConfig:
    """How X0 is drawn, plus the seed of the trajectory's random stream.

    ``uniform_k_sigma`` draws X0 ~ U[-k sigma, k sigma] with sigma = sqrt(sigma_sq);
    ``stationary`` draws X0 ~ N(0, sigma_sq / (2 theta)); ``fixed`` uses ``x0``.
    """

    k: float = 30.0
    seed: int = 0
    init_mode: str = "uniform_k_sigma"
    x0: float = 0.0

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if not self.k >= 0:
            raise ValueError("k must be >= 0")
        if int(self.seed) != self.seed or self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be an integer in [0, 2**64)")


def _check_params(params) -> OUParams:
    if not isinstance(params, OUParams):
        raise ParameterDomainError(f"expected OUParams, got {type(params).__name__}")
    return params


def conditional_variance(theta, sigma_sq, dt):
    """V(dt) = sigma^2/(2 theta) * (1 - exp(-2 theta dt)); works elementwise on arrays."""
    return sigma_sq / (2.0 * theta) * -np.expm1(-2.0 * theta * dt)


def transition_moments(params: OUParams, x_prev: float, dt: float) -> TransitionMoments:
    params = _check_params(params)
    if not dt >= 0:
        raise DegenerateGrid(f"dt must be >= 0, got {dt!r}")
    if dt == 0:
        return TransitionMoments(float(x_prev), 0.0)
    mean = x_prev * math.exp(-params.theta * dt)
    var = float(conditional_variance(params.theta, params.sigma_sq, dt))
    return TransitionMoments(mean, var)


def analytic_moments(params: OUParams, x0_mean: float, x0_var: float, t: float, s: float):
    """Return (E[X_t], Var[X_t], Cov(X_t, X_s)).

    The covariance is the stationary one, ``sigma^2/(2 theta) exp(-theta |t - s|)``;
    it is exact only when X0 is drawn from the stationary law.
    """
    params = _check_params(params)
    if t < 0 or s < 0:
        raise ValueError("t and s must be >= 0")
    th = params.theta
    vs = params.stationary_variance()
    mean_t = x0_mean * math.exp(-th * t)
    if x0_var == vs:
        var_t = vs
    else:
        var_t = vs + math.exp(-2.0 * th * t) * (x0_var - vs)
    cov_ts = vs * math.exp(-th * abs(t - s))
    return mean_t, var_t, cov_ts


def transition_log_density(params: OUParams, x_prev, x, dt):
    """Gaussian log-density of moving from ``x_prev`` to ``x`` over ``dt``.

    Vectorized over ``x_prev``/``x``/``dt``.
    """
    params = _check_params(params)
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(~(dt > 0)):
        raise DegenerateGrid("dt must be > 0 for a transition density")
    v = conditional_variance(params.theta, params.sigma_sq, dt)
    resid = np.asarray(x, dtype=np.float64) - np.asarray(x_prev, dtype=np.float64) * np.exp(-params.theta * dt)
    out = -0.5 * (LOG_2PI + np.log(v)) - 0.5 * resid * resid / v
    return float(out) if np.ndim(out) == 0 else out


def make_rng(seed: int, spawn_key: tuple = ()) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(spawn_key))
    return np.random.Generator(np.random.Philox(ss))


def _draw_x0(params: OUParams, sim: SimConfig, rng: np.random.Generator) -> float:
    if sim.init_mode == "fixed":
        return float(sim.x0)
    if sim.init_mode == "stationary":
        return float(rng.standard_normal() * math.sqrt(params.stationary_variance()))
    half = sim.k * params.sigma
    return float(rng.uniform(-half, half))


def simulate_exact(params: OUParams, grid: GridSpec, sim: SimConfig | None = None) -> Trajectory:
    """Sample a path from the exact conditional law, no discretization error.

    X0 is drawn first, then ``n_steps`` standard normals drive
    ``X_{i+1} = a X_i + sqrt(V) xi_i`` with ``a = exp(-theta dt)``.
    """
    params = _check_params(params)
    if not isinstance(grid, GridSpec):
        raise DegenerateGrid("grid must be a GridSpec")
    sim = sim or SimConfig()
    rng = make_rng(sim.seed)
    x0 = _draw_x0(params, sim, rng)
    xi = rng.standard_normal(grid.n_steps)
    a = math.exp(-params.theta * grid.dt)
    sd = math.sqrt(conditional_variance(params.theta, params.sigma_sq, grid.dt))
    # y[i] = sd*xi[i] + a*y[i-1], y[-1] = x0
    tail, _ = lfilter([1.0], [1.0, -a], sd * xi, zi=[a * x0])
    x = np.empty(grid.n_steps + 1)
    x[0] = x0
    x[1:] = tail
    return Trajectory(x, grid)


def sample_transitions(params: OUParams, x_prev: float, dt: float, size: int, seed: int) -> np.ndarray:
    """Draw ``size`` independent one-step transitions out of the same state ``x_prev``."""
    m = transition_moments(params, x_prev, dt)
    rng = make_rng(seed)
    return m.mean + math.sqrt(m.variance) * rng.standard_normal(size)


def _float_words(v: float) -> tuple[int, int]:
    (bits,) = struct.unpack("<Q", struct.pack("<d", v))
    return bits >> 32, bits & 0xFFFFFFFF


def derive_seed(master: int, params: OUParams, occurrence: int, traj_index: int) -> int:
    """Per-trajectory 64-bit seed.

    ``SeedSequence(master, spawn_key=(bits(theta), bits(sigma_sq), occurrence, traj_index))``
    reduced to one uint64. The key is built from the parameter values, not their
    list position, so reordering combinations reorders but does not change the
    dataset. ``occurrence`` separates repeated identical combinations.
    """
    key = (*_float_words(params.theta), *_float_words(params.sigma_sq), int(occurrence), int(traj_index))
    ss = np.random.SeedSequence(int(master), spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def simulate_batch(
    params_list: Sequence[OUParams],
    grid: GridSpec,
    sim: SimConfig,
    count_per_params: int,
) -> list[tuple[Trajectory, OUParams]]:
    """Labelled dataset, ordered by parameter combination then trajectory index.

    ``sim.seed`` is the master seed; see :func:`derive_seed` for the split rule.
    """
    if count_per_params < 1:
        raise ValueError("count_per_params must be >= 1")
    seen = Counter()
    out = []
    for p in params_list:
        p = _check_params(p)
        occ = seen[p.as_tuple()]
        seen[p.as_tuple()] += 1
        for j in range(count_per_params):
            s = replace(sim, seed=derive_seed(sim.seed, p, occ, j))
            out.append((simulate_exact(p, grid, s), p))
    return out
