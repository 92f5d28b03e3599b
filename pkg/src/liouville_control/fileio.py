"""CSV and JSON artifact formats.

All floats are written with 17 significant digits so files round-trip
bit-exactly; rows follow row-major cell order.  Nothing time- or
machine-dependent goes into these files, which keeps repeated runs of the
same configuration byte-identical.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .adjoint import AdjointTrajectory
from .controls import ControlPath
from .errors import SchemaError
from .forward import StateTrajectory
from .grid import GridSpec, ScalarField, TimeGrid

__all__ = [
    "write_field_csv",
    "read_field_csv",
    "write_control_csv",
    "read_control_csv",
    "write_trajectory_summary",
    "write_adjoint_summary",
    "write_iterations_csv",
    "write_json",
]


def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def write_field_csv(field: ScalarField, path: str) -> None:
    """Snapshot format: header ``x[,y],value``, one row per cell."""
    grid = field.grid
    pts = grid.cell_centers()
    vals = field.values.ravel()
    header = ("x,value" if grid.dim == 1 else "x,y,value")
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row, v in zip(pts, vals):
            fh.write(",".join(_fmt(c) for c in row) + "," + _fmt(v) + "\n")


def read_field_csv(path: str) -> ScalarField:
    """Rebuild a field (and its grid) from a snapshot file."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    dim = len(header) - 1
    coords = [np.unique(data[:, ax]) for ax in range(dim)]
    n = tuple(len(c) for c in coords)
    h = tuple(float(c[1] - c[0]) for c in coords)
    lo = tuple(float(c[0]) - hh / 2 for c, hh in zip(coords, h))
    hi = tuple(float(c[-1]) + hh / 2 for c, hh in zip(coords, h))
    grid = GridSpec(dim=dim, lo=lo, hi=hi, n=n)
    return ScalarField(grid, data[:, -1].reshape(n))


def write_control_csv(control: ControlPath, path: str) -> None:
    """Control format: header ``t,u1_1..u1_d,u2_1..u2_d``."""
    d = control.dim
    header = "t," + ",".join(f"u1_{r + 1}" for r in range(d)) + "," + ",".join(
        f"u2_{r + 1}" for r in range(d)
    )
    nodes = control.timegrid.nodes()
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i, t in enumerate(nodes):
            row = [t, *control.u1[i], *control.u2[i]]
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_control_csv(path: str) -> ControlPath:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    d = (len(header) - 1) // 2
    t = data[:, 0]
    nt = len(t) - 1
    if nt < 2 or t[-1] <= 0:
        raise SchemaError(f"control file {path} needs at least 3 nodes ending at T > 0")
    tg = TimeGrid(T=float(t[-1]), nt=nt)
    return ControlPath(tg, data[:, 1 : 1 + d], data[:, 1 + d : 1 + 2 * d])


def write_trajectory_summary(traj: StateTrajectory, path: str) -> None:
    """Per-step diagnostics: ``t,mass,min,l2`` plus one column per recorded
    weighted norm (named h<m>k<k>)."""
    norm_keys = sorted(traj.norms.keys())
    header = "t,mass,min,l2" + "".join(f",h{m}k{k}" for m, k in norm_keys)
    dt = traj.timegrid.dt
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for n in range(traj.timegrid.nt + 1):
            row = [n * dt, traj.mass[n], traj.min_value[n], traj.l2[n]]
            row += [traj.norms[mk][n] for mk in norm_keys]
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_adjoint_summary(traj: AdjointTrajectory, path: str) -> None:
    header = "t,l2" + (",h0_negk" if traj.h0_negk is not None else "")
    dt = traj.timegrid.dt
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for n in range(traj.timegrid.nt + 1):
            row = [n * dt, traj.l2[n]]
            if traj.h0_negk is not None:
                row.append(traj.h0_negk[n])
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_iterations_csv(cost_history, vi_history, steps, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("iter,cost,vi_residual,step\n")
        for i, vi in enumerate(vi_history):
            step = steps[i] if i < len(steps) else 0.0
            fh.write(f"{i},{_fmt(cost_history[i])},{_fmt(vi)},{_fmt(step)}\n")


def write_json(obj, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def ensure_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)
