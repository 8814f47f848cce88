"""CSV persistence: header row, comma separated, 17 significant digits for reals."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .grid import BoundaryTrace, StripGrid


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def write_rows(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_rows(path):
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def write_field(path, values, grid: StripGrid, t_value: float | None = None) -> Path:
    """Spatial (nx, ny) or space-time (nt, nx, ny) field as rows (x, y, t, Re, Im)."""
    values = np.asarray(values)
    X, Y = grid.mesh
    if values.shape == grid.space_shape:
        levels = [(0.0 if t_value is None else t_value, values)]
    elif values.shape == grid.shape:
        levels = list(zip(grid.t, values))
    else:
        raise ValueError(f"field shape {values.shape} does not match grid")

    def rows():
        for tv, lvl in levels:
            lvl = np.asarray(lvl, dtype=complex)
            for xv, yv, z in zip(X.ravel(), Y.ravel(), lvl.ravel()):
                yield (xv, yv, tv, z.real, z.imag)

    return write_rows(path, ("x", "y", "t", "Re", "Im"), rows())


def write_trace(path, trace: BoundaryTrace) -> Path:
    g = trace.grid

    def rows():
        for n, tv in enumerate(g.t):
            for xv, z in zip(g.x, trace.values[n]):
                yield (xv, tv, z.real, z.imag)

    return write_rows(path, ("x", "t", "Re", "Im"), rows())


def read_field(path, grid: StripGrid) -> np.ndarray:
    """Inverse of write_field for a single level; returns complex (nx, ny)."""
    _, rows = read_rows(path)
    vals = np.array([complex(float(r[3]), float(r[4])) for r in rows])
    return vals.reshape(grid.space_shape)


def read_trace(path, grid: StripGrid, side: str) -> BoundaryTrace:
    _, rows = read_rows(path)
    vals = np.array([complex(float(r[2]), float(r[3])) for r in rows])
    return BoundaryTrace(side, vals.reshape(grid.nt, grid.nx), grid)
