"""Regime-by-regime comparison of the likelihood fit and the LSTM regressor.

Both estimators see the same simulated paths per regime. Statistics per
(regime, estimator, parameter): mean, median, population std and RMSE
against the true value, so that rmse^2 = bias^2 + std^2 exactly.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInput
from .formats import fmt_float, write_json, write_rows_csv
from .mle import MleConfig, fit_many
from .neural import LstmModel, infer
from .ou_core import GridSpec, OUParams, SimConfig, simulate_batch

log = logging.getLogger(__name__)

REGIME_TABLE = {
    "strong_mean_reversion": (2.0, 1.0),
    "weak_mean_reversion": (0.2, 1.0),
    "high_volatility": (0.5, 4.0),
    "low_volatility": (0.5, 0.25),
}
ESTIMATORS = ("MLE", "RNN")
ESTIMATES_HEADER = ["regime", "path_idx", "estimator", "theta_hat", "sigma_sq_hat", "converged"]


@dataclass(frozen=True)
class Regime:
    name: str
    params: OUParams
    stationary_variance: float


def make_regimes(names=None) -> list[Regime]:
    names = list(REGIME_TABLE) if names is None else list(names)
    out = []
    for n in names:
        if n not in REGIME_TABLE:
            raise KeyError(f"unknown regime {n!r}; choose from {list(REGIME_TABLE)}")
        p = OUParams(*REGIME_TABLE[n])
        out.append(Regime(n, p, p.stationary_variance()))
    return out


@dataclass(frozen=True)
class ParamStats:
    mean: float
    median: float
    std: float
    rmse: float


@dataclass
class EstimatorStats:
    theta: ParamStats | None
    sigma_sq: ParamStats | None
    n_succeeded: int
    n_failed: int = 0


def param_stats(values, truth: float) -> ParamStats:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EmptyInput("no estimates to aggregate")
    return ParamStats(
        mean=float(np.mean(v)),
        median=float(np.median(v)),
        std=float(np.std(v)),
        rmse=float(np.sqrt(np.mean((v - truth) ** 2))),
    )


def aggregate(estimates, truth: OUParams) -> EstimatorStats:
    """Summary of (theta_hat, sigma_sq_hat) rows against the true parameters."""
    est = np.asarray(estimates, dtype=np.float64).reshape(-1, 2) if len(estimates) else np.empty((0, 2))
    if est.shape[0] == 0:
        raise EmptyInput("no estimates to aggregate")
    return EstimatorStats(param_stats(est[:, 0], truth.theta), param_stats(est[:, 1], truth.sigma_sq), est.shape[0])


def _aggregate_with_failures(estimates, truth) -> EstimatorStats:
    est = np.asarray(estimates, dtype=np.float64).reshape(-1, 2)
    ok = np.all(np.isfinite(est), axis=1)
    n_failed = int((~ok).sum())
    if not ok.any():
        return EstimatorStats(None, None, 0, n_failed)
    stats = aggregate(est[ok], truth)
    stats.n_failed = n_failed
    return stats


@dataclass
class BenchConfig:
    regimes: list = field(default_factory=lambda: list(REGIME_TABLE))
    n_paths: int = 500
    dt: float = 0.01
    n_steps: int = 500
    k: float = 30.0
    init_mode: str = "uniform_k_sigma"
    seed: int = 0
    mle: MleConfig = field(default_factory=MleConfig)
    workers: int = 1


@dataclass
class RegimeReport:
    regime: str
    truth: OUParams
    n_paths: int
    stats: dict  # estimator -> EstimatorStats


@dataclass
class BenchmarkReport:
    config: BenchConfig
    regimes: list  # RegimeReport
    records: list  # estimates.csv rows
    timing: dict   # estimator -> regime -> seconds (not part of the deterministic bundle)


def inference_seed(master: int) -> int:
    return int(np.random.SeedSequence(int(master), spawn_key=(0x1F,)).generate_state(1, np.uint64)[0])


def run_benchmark(config: BenchConfig, model: LstmModel | None = None) -> BenchmarkReport:
    """Simulate fresh paths per regime and run both estimators on them.

    The RNN columns are omitted when ``model`` is None.
    """
    if config.n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    grid = GridSpec(config.dt, config.n_steps)
    sim = SimConfig(k=config.k, seed=inference_seed(config.seed), init_mode=config.init_mode)
    reports, records = [], []
    timing = {e: {} for e in ESTIMATORS}
    for reg in make_regimes(config.regimes):
        data = simulate_batch([reg.params], grid, sim, config.n_paths)
        trajs = [t for t, _ in data]
        stats = {}

        t0 = time.perf_counter()
        fits = fit_many(trajs, config.mle, config.workers)
        timing["MLE"][reg.name] = time.perf_counter() - t0
        mle_est = np.full((len(trajs), 2), np.nan)
        for i, r in enumerate(fits):
            if isinstance(r, Exception):
                log.warning("MLE failed on %s path %d: %s", reg.name, i, r)
                records.append([reg.name, i, "MLE", math.nan, math.nan, False])
                continue
            mle_est[i] = r.params_hat.as_tuple()
            records.append([reg.name, i, "MLE", mle_est[i, 0], mle_est[i, 1], r.converged])
        stats["MLE"] = _aggregate_with_failures(mle_est, reg.params)

        if model is not None:
            t0 = time.perf_counter()
            rnn_est = infer(model, trajs)
            timing["RNN"][reg.name] = time.perf_counter() - t0
            for i, (a, b) in enumerate(rnn_est):
                ok = bool(np.isfinite(a) and np.isfinite(b))
                records.append([reg.name, i, "RNN", a, b, ok])
            stats["RNN"] = _aggregate_with_failures(rnn_est, reg.params)

        reports.append(RegimeReport(reg.name, reg.params, config.n_paths, stats))
    if model is None:
        del timing["RNN"]
    return BenchmarkReport(config, reports, records, timing)


# ---------------------------------------------------------------- emission


def _f4(v):
    return "n/a" if v is None or not math.isfinite(v) else f"{v:.4f}"


def render_markdown(report: BenchmarkReport) -> str:
    c = report.config
    lines = [
        "# MLE and RNN estimation statistics across parameter regimes",
        "",
        f"paths per regime: {c.n_paths}; grid: dt={c.dt}, steps={c.n_steps}; "
        f"X0 law: {c.init_mode} (k={c.k}); seed: {c.seed}",
        "",
        "| True θ | True σ² | Estimator | θ̂ Mean | θ̂ Median | θ̂ Std | θ̂ RMSE "
        "| σ̂² Mean | σ̂² Median | σ̂² Std | σ̂² RMSE | ok | failed |",
        "|---|---|---|---|---|---|---|---|---|---|---|---|---|",
    ]
    for rr in report.regimes:
        for est, st in rr.stats.items():
            cells = []
            for ps in (st.theta, st.sigma_sq):
                cells += [_f4(None)] * 4 if ps is None else [_f4(ps.mean), _f4(ps.median), _f4(ps.std), _f4(ps.rmse)]
            lines.append(
                f"| {rr.truth.theta:g} | {rr.truth.sigma_sq:g} | {est} | " + " | ".join(cells)
                + f" | {st.n_succeeded} | {st.n_failed} |"
            )
    lines.append("")
    return "\n".join(lines)


def summary_rows(report: BenchmarkReport):
    rows = []
    for rr in report.regimes:
        for est, st in rr.stats.items():
            for pname, ps, truth in (("theta", st.theta, rr.truth.theta), ("sigma_sq", st.sigma_sq, rr.truth.sigma_sq)):
                vals = [math.nan] * 4 if ps is None else [ps.mean, ps.median, ps.std, ps.rmse]
                rows.append([rr.regime, rr.truth.theta, rr.truth.sigma_sq, est, pname, truth, *vals,
                             st.n_succeeded, st.n_failed])
    return rows


SUMMARY_HEADER = ["regime", "theta_true", "sigma_sq_true", "estimator", "param", "true_value",
                  "mean", "median", "std", "rmse", "n_succeeded", "n_failed"]


def report_json(report: BenchmarkReport) -> dict:
    c = report.config
    return {
        "config": {**{k: v for k, v in asdict(c).items() if k != "mle"}, "mle": asdict(c.mle)},
        "regimes": [
            {
                "regime": rr.regime,
                "theta": rr.truth.theta,
                "sigma_sq": rr.truth.sigma_sq,
                "n_paths": rr.n_paths,
                "estimators": {est: asdict(st) for est, st in rr.stats.items()},
            }
            for rr in report.regimes
        ],
    }


def write_report_bundle(report: BenchmarkReport, out_dir) -> list[Path]:
    """report.md / report.csv / report.json / estimates.csv, all seed-deterministic.

    Wall-clock numbers go to timing.json, which is not part of the bundle.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.md", out / "report.csv", out / "report.json", out / "estimates.csv"]
    paths[0].write_text(render_markdown(report))
    write_rows_csv(paths[1], SUMMARY_HEADER, summary_rows(report))
    write_json(paths[2], report_json(report))
    write_rows_csv(paths[3], ESTIMATES_HEADER, report.records)
    timing = {
        est: {
            "total_s": sum(per.values()),
            "per_regime_s": per,
            "mean_per_path_s": sum(per.values()) / max(1, len(per) * report.config.n_paths),
        }
        for est, per in report.timing.items()
    }
    write_json(out / "timing.json", timing)
    return paths


def read_estimates_csv(path) -> dict:
    """{(regime, estimator): (N, 2) array} with NaN rows for failed paths."""
    acc = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["regime"], row["estimator"])
            acc.setdefault(key, []).append((int(row["path_idx"]), float(row["theta_hat"]), float(row["sigma_sq_hat"])))
    out = {}
    for key, rows in acc.items():
        rows.sort()
        out[key] = np.array([(a, b) for _, a, b in rows])
    return out


def reaggregate(path) -> dict:
    """Recompute the summary statistics from a persisted estimates CSV."""
    out = {}
    for (regime, est), arr in read_estimates_csv(path).items():
        out[(regime, est)] = _aggregate_with_failures(arr, OUParams(*REGIME_TABLE[regime]))
    return out
