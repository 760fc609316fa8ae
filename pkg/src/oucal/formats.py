"""On-disk formats: trajectory CSV, dataset manifest, generic CSV/JSON helpers."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .ou_core import GridSpec, Trajectory


def fmt_float(v) -> str:
    """Shortest decimal that parses back to the same double."""
    return repr(float(v))


def write_trajectory_csv(path, traj: Trajectory) -> None:
    t = traj.grid.times()
    with open(path, "w", newline="") as fh:
        fh.write("t,x\n")
        for ti, xi in zip(t, traj.x):
            fh.write(f"{fmt_float(ti)},{fmt_float(xi)}\n")


def read_trajectory_csv(path, dt: float | None = None) -> Trajectory:
    """Parse a ``t,x`` CSV. ``dt`` defaults to t[1] - t[0].

    Raises ``ValueError`` on a malformed header, row, or non-uniform grid.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["t", "x"]:
        raise ValueError(f"{path}: expected header 't,x'")
    t, x = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
        try:
            t.append(float(row[0]))
            x.append(float(row[1]))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if len(x) < 2:
        raise ValueError(f"{path}: need at least 2 observations")
    t = np.asarray(t)
    if dt is None:
        dt = float(t[1] - t[0])
    steps = np.diff(t)
    if not np.allclose(steps, dt, rtol=1e-9, atol=1e-12):
        raise ValueError(f"{path}: time column is not a uniform grid with dt={dt}")
    return Trajectory(np.asarray(x), GridSpec(dt, len(x) - 1))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_dataset(out_dir, dataset, grid: GridSpec, master_seed: int, params_list, count: int,
                  sim_info: dict | None = None, prefix: str = "traj") -> dict:
    """Write one CSV per trajectory plus ``manifest.json``; return the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (traj, p) in enumerate(dataset):
        name = f"{prefix}_{i:05d}.csv"
        write_trajectory_csv(out_dir / name, traj)
        files.append({
            "file": name,
            "theta": p.theta,
            "sigma_sq": p.sigma_sq,
            "sha256": sha256_file(out_dir / name),
        })
    manifest = {
        "master_seed": int(master_seed),
        "grid": {"dt": grid.dt, "n_steps": grid.n_steps},
        "parameter_combinations": [{"theta": p.theta, "sigma_sq": p.sigma_sq} for p in params_list],
        "count_per_params": int(count),
        "sim": sim_info or {},
        "files": files,
    }
    write_json(out_dir / "manifest.json", manifest)
    return manifest


def load_dataset(directory):
    """Read a directory written by :func:`write_dataset` back as (Trajectory, OUParams) pairs."""
    from .ou_core import OUParams

    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    dt = manifest["grid"]["dt"]
    out = []
    for entry in manifest["files"]:
        traj = read_trajectory_csv(directory / entry["file"], dt=dt)
        out.append((traj, OUParams(entry["theta"], entry["sigma_sq"])))
    return out, manifest


def write_rows_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return fmt_float(v) if math.isfinite(v) else str(float(v))
    return v
