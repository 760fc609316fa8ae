"""Command-line entry point: ``oucal {simulate,fit,gmm,train,infer,benchmark}``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
Every run writes ``effective_config.json`` to its output directory; passing
that file back through ``--config`` replays the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import REGIME_TABLE, BenchConfig, make_regimes, run_benchmark, write_report_bundle
from .errors import DimensionMismatch, OUCalError
from .formats import load_dataset, read_trajectory_csv, write_dataset, write_json, write_rows_csv
from .mle import MleConfig, fit_mle, gmm_initialize
from .neural import LossConfig, TrainConfig, infer, load_model, save_model, train
from .ou_core import INIT_MODES, GridSpec, OUParams, SimConfig, simulate_batch

log = logging.getLogger("oucal")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parser


def _common(p):
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=0, help="master seed")
    g.add_argument("--out", default="out", help="output directory")
    g.add_argument("--config", help="JSON config file; explicit flags override it")
    g.add_argument("--threads", type=int, default=1, help="worker processes for per-path fits")
    g.add_argument("--verbose", "-v", action="count", default=0)


def _grid_flags(p, steps=500):
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--k", type=float, default=30.0, help="X0 ~ U[-k sigma, k sigma]")
    p.add_argument("--init", choices=INIT_MODES, default="uniform_k_sigma")
    p.add_argument("--x0", type=float, default=0.0, help="start value for --init fixed")


def _mle_flags(p):
    p.add_argument("--tol", type=float, default=1e-6, help="BFGS gradient tolerance")
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--basin-hops", type=int, default=50)
    p.add_argument("--no-basinhop", action="store_true", help="disable the basin-hopping stage")
    p.add_argument("--hop-scale", type=float, default=0.5)
    p.add_argument("--hop-temperature", type=float, default=1.0)
    p.add_argument("--trigger", choices=("auto", "always", "never"), default="auto")


def _train_flags(p, epochs, per_regime, hidden):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=hidden)
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--per-regime", type=int, default=per_regime,
                   help="training paths per regime when no --data is given")
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--w-theta", type=float, default=1.0)
    p.add_argument("--w-sigma-sq", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oucal", description="Ornstein-Uhlenbeck parameter estimation toolkit")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate exact OU paths to CSV")
    _common(p)
    p.add_argument("--theta", type=float)
    p.add_argument("--sigma-sq", type=float)
    p.add_argument("--regime", action="append", choices=[*REGIME_TABLE, "all"],
                   help="named parameter regime (repeatable); alternative to --theta/--sigma-sq")
    p.add_argument("--count", type=int, default=1, help="paths per parameter combination")
    _grid_flags(p)

    for name, hlp in (("fit", "maximum-likelihood fit of each input path"),
                      ("gmm", "moment-based initial estimate of each input path")):
        p = sub.add_parser(name, help=hlp)
        _common(p)
        p.add_argument("inputs", nargs="*", help="trajectory CSVs or dataset directories")
        p.add_argument("--dt", type=float, help="override the grid step read from the t column")
        if name == "fit":
            _mle_flags(p)

    p = sub.add_parser("train", help="train the LSTM regressor")
    _common(p)
    p.add_argument("--data", help="dataset directory written by 'simulate' (default: simulate the four regimes)")
    _train_flags(p, epochs=100, per_regime=5000, hidden=32)
    _grid_flags(p)

    p = sub.add_parser("infer", help="LSTM estimates for input paths")
    _common(p)
    p.add_argument("inputs", nargs="*")
    p.add_argument("--model", help="model file written by 'train'")

    p = sub.add_parser("benchmark", help="regime-by-regime MLE vs RNN comparison")
    _common(p)
    p.add_argument("--paths", type=int, default=500, help="inference paths per regime")
    p.add_argument("--regime", action="append", choices=[*REGIME_TABLE, "all"])
    p.add_argument("--model", help="pre-trained model; otherwise a model is trained first")
    p.add_argument("--no-rnn", action="store_true", help="skip the neural estimator")
    _grid_flags(p)
    _mle_flags(p)
    _train_flags(p, epochs=10, per_regime=250, hidden=16)
    return ap


def parse_args(argv):
    """Parse flags, layering ``--config`` values underneath explicit flags."""
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            ap.error(f"cannot read --config {args.config}: {exc}")
        if isinstance(cfg, dict) and "args" in cfg:
            if cfg.get("command") not in (None, args.command):
                ap.error(f"config is for '{cfg['command']}', not '{args.command}'")
            cfg = cfg["args"]
        if not isinstance(cfg, dict):
            ap.error("--config must hold a JSON object")
        subparser = ap._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = set(cfg) - known
        if unknown:
            ap.error(f"unknown keys in --config: {sorted(unknown)}")
        cfg.pop("config", None)
        subparser.set_defaults(**cfg)
        args = ap.parse_args(argv)
    return ap, args


def effective_config(args) -> dict:
    d = {k: v for k, v in vars(args).items() if k not in ("config", "command")}
    return {"command": args.command, "args": d}


# ---------------------------------------------------------------- helpers


def _regime_params(names):
    if not names:
        return []
    if "all" in names:
        names = list(REGIME_TABLE)
    return [r.params for r in make_regimes(dict.fromkeys(names))]


def _grid(args):
    try:
        return GridSpec(args.dt, args.steps)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _sim(args):
    try:
        return SimConfig(k=args.k, seed=args.seed, init_mode=args.init, x0=args.x0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _mle_config(args) -> MleConfig:
    try:
        return MleConfig(
            grad_tolerance=args.tol,
            max_bfgs_iters=args.max_iters,
            basin_hops=0 if args.no_basinhop else args.basin_hops,
            hop_scale=args.hop_scale,
            hop_temperature=args.hop_temperature,
            nonconvexity_trigger=args.trigger,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_configs(args):
    try:
        return (
            TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                        split_fraction=args.split, seed=args.seed, hidden_size=args.hidden),
            LossConfig(args.delta, args.w_theta, args.w_sigma_sq),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _collect_inputs(inputs, dt):
    """Expand directories; returns [(name, Trajectory | Exception, OUParams | None)].

    Missing paths raise ``OSError``; unparsable files come back as the exception.
    """
    if not inputs:
        raise UsageError("no input trajectories given")
    out = []
    for item in inputs:
        p = Path(item)
        if not p.exists():
            raise FileNotFoundError(f"input not found: {p}")
        if p.is_dir():
            manifest = p / "manifest.json"
            if manifest.exists():
                meta = json.loads(manifest.read_text())
                gdt = dt if dt is not None else meta["grid"]["dt"]
                for entry in meta["files"]:
                    out.append((str(p / entry["file"]), _try_read(p / entry["file"], gdt),
                                OUParams(entry["theta"], entry["sigma_sq"])))
            else:
                for f in sorted(p.glob("*.csv")):
                    out.append((str(f), _try_read(f, dt), None))
        else:
            out.append((str(p), _try_read(p, dt), None))
    return out


def _try_read(path, dt):
    try:
        return read_trajectory_csv(path, dt)
    except (ValueError, OUCalError) as exc:
        return exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_simulate(args):
    if (args.theta is None) != (args.sigma_sq is None):
        raise UsageError("--theta and --sigma-sq must be given together")
    params = []
    if args.theta is not None:
        if not (args.theta > 0 and math.isfinite(args.theta)):
            raise UsageError(f"--theta must be > 0, got {args.theta}")
        if not (args.sigma_sq > 0 and math.isfinite(args.sigma_sq)):
            raise UsageError(f"--sigma-sq must be > 0, got {args.sigma_sq}")
        params.append(OUParams(args.theta, args.sigma_sq))
    params += _regime_params(args.regime)
    if not params:
        raise UsageError("give --theta/--sigma-sq or --regime")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    grid, sim = _grid(args), _sim(args)
    data = simulate_batch(params, grid, sim, args.count)
    out = _out_dir(args)
    write_dataset(out, data, grid, args.seed, params, args.count,
                  sim_info={"init_mode": sim.init_mode, "k": sim.k, "x0": sim.x0,
                            "seed_rule": "SeedSequence(master, spawn_key=(theta bits hi/lo, sigma_sq bits hi/lo, "
                                         "occurrence, traj_index)) -> uint64 -> Philox"})
    write_json(out / "effective_config.json", effective_config(args))
    print(f"wrote {len(data)} trajectories to {out}")
    return 0


def cmd_fit(args):
    items = _collect_inputs(args.inputs, args.dt)
    config = _mle_config(args)
    out = _out_dir(args)
    rows, reports, times = [], [], []
    for name, traj, truth in items:
        row = {"file": name}
        if isinstance(traj, Exception):
            row.update(error=str(traj))
        else:
            try:
                res = fit_mle(traj, config)
                row.update(res.to_report())
                times.append(res.wall_time)
            except OUCalError as exc:
                row.update(error=str(exc))
        if truth is not None:
            row.update(theta_true=truth.theta, sigma_sq_true=truth.sigma_sq)
        reports.append(row)
        if "error" in row:
            log.warning("%s: %s", name, row["error"])
    header = ["file", "theta_hat", "sigma_sq_hat", "loglik", "converged", "stage", "iters", "wall_time_s",
              "theta_true", "sigma_sq_true", "error"]
    write_rows_csv(out / "fits.csv", header, [[r.get(h, "") for h in header] for r in reports])
    write_json(out / "fits.json", reports)
    write_json(out / "effective_config.json", effective_config(args))
    n_ok = len(times)
    mean_t = sum(times) / n_ok if n_ok else float("nan")
    print(f"fitted {n_ok}/{len(items)} paths; mean wall time {mean_t:.4f} s per path")
    return 0 if n_ok else 1


def cmd_gmm(args):
    items = _collect_inputs(args.inputs, args.dt)
    out = _out_dir(args)
    rows, n_ok = [], 0
    for name, traj, _ in items:
        try:
            if isinstance(traj, Exception):
                raise traj
            g = gmm_initialize(traj)
            rows.append([name, g.theta_hat, g.sigma_sq_hat, g.rho_hat, g.rho_clamped, g.theta_floored, ""])
            n_ok += 1
        except (ValueError, OUCalError) as exc:
            rows.append([name, "", "", "", "", "", str(exc)])
    write_rows_csv(out / "gmm.csv",
                   ["file", "theta_hat", "sigma_sq_hat", "rho_hat", "rho_clamped", "theta_floored", "error"], rows)
    write_json(out / "effective_config.json", effective_config(args))
    print(f"initialized {n_ok}/{len(items)} paths")
    return 0 if n_ok else 1


def _training_data(args):
    if getattr(args, "data", None):
        data, _ = load_dataset(args.data)
        return data
    if args.per_regime < 1:
        raise UsageError("--per-regime must be >= 1")
    params = [r.params for r in make_regimes()]
    return simulate_batch(params, _grid(args), _sim(args), args.per_regime)


def _train_and_save(args, out):
    tcfg, lcfg = _train_configs(args)
    data = _training_data(args)
    model, hist = train(data, tcfg, lcfg)
    save_model(model, out / "model.bin")
    write_rows_csv(out / "loss_curve.csv", ["epoch", "train_loss", "val_loss"], hist.rows())
    return model, hist


def cmd_train(args):
    out = _out_dir(args)
    _, hist = _train_and_save(args, out)
    write_json(out / "effective_config.json", effective_config(args))
    print(f"trained on {hist.n_train} paths ({hist.n_val} validation); "
          f"final train loss {hist.train_loss[-1]:.5f}, val loss {hist.val_loss[-1]:.5f}" if hist.train_loss
          else "trained for 0 epochs")
    return 0


def cmd_infer(args):
    if not args.model:
        raise UsageError("--model is required")
    if not Path(args.model).exists():
        raise FileNotFoundError(f"model not found: {args.model}")
    model = load_model(args.model)
    items = _collect_inputs(args.inputs, None)
    bad = [(n, t) for n, t, _ in items if isinstance(t, Exception)]
    if bad:
        raise ValueError(f"{bad[0][0]}: {bad[0][1]}")
    trajs = [t for _, t, _ in items]
    est = infer(model, trajs)
    out = _out_dir(args)
    rows = [[n, a, b] + ([p.theta, p.sigma_sq] if p else ["", ""]) for (n, _, p), (a, b) in zip(items, est)]
    write_rows_csv(out / "estimates.csv", ["file", "theta_hat", "sigma_sq_hat", "theta_true", "sigma_sq_true"], rows)
    write_json(out / "effective_config.json", effective_config(args))
    print(f"estimated {len(trajs)} paths")
    return 0


def cmd_benchmark(args):
    regimes = list(REGIME_TABLE) if not args.regime or "all" in args.regime else list(dict.fromkeys(args.regime))
    if args.paths < 1:
        raise UsageError("--paths must be >= 1")
    grid = _grid(args)
    cfg = BenchConfig(regimes=regimes, n_paths=args.paths, dt=grid.dt, n_steps=grid.n_steps, k=args.k,
                      init_mode=args.init, seed=args.seed, mle=_mle_config(args), workers=args.threads)
    out = _out_dir(args)
    model = None
    if args.model:
        if not Path(args.model).exists():
            raise FileNotFoundError(f"model not found: {args.model}")
        model = load_model(args.model)
    elif not args.no_rnn:
        model, _ = _train_and_save(args, out)
    report = run_benchmark(cfg, model)
    write_report_bundle(report, out)
    write_json(out / "effective_config.json", effective_config(args))
    print((out / "report.md").read_text())
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "gmm": cmd_gmm,
    "train": cmd_train,
    "infer": cmd_infer,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    ap, args = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"oucal {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except DimensionMismatch as exc:
        print(f"oucal {args.command}: dimension mismatch: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, OUCalError) as exc:
        print(f"oucal {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
